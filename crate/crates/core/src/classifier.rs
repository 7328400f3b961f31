//! Convolutional classifier: conv-ReLU(-pool) blocks followed by
//! fully-connected layers. Each layer is its own parameter group so the
//! fine-tuning and freezing schedules can address it by name.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{invalid, Result};
use crate::imageops;
use crate::optim::{Bound, Multipliers, ParamSet};
use crate::rng::{self, stream};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const FC_LAST: &str = "fc_last";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub filter: usize,
    /// 2×2 max-pool with stride 2 after the ReLU.
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_side: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Hidden fully-connected widths; the final layer (`fc_last`) is implied.
    pub fc_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let block = |channels| ConvBlock {
            channels,
            filter: 3,
            pool: true,
        };
        Self {
            input_side: 32,
            conv_blocks: vec![block(16), block(32), block(64)],
            fc_dims: vec![128],
            num_classes: 4,
        }
    }
}

impl ClassifierConfig {
    /// 8×8-input, 2-class network for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            input_side: 8,
            conv_blocks: vec![
                ConvBlock {
                    channels: 3,
                    filter: 3,
                    pool: true,
                },
                ConvBlock {
                    channels: 4,
                    filter: 3,
                    pool: true,
                },
            ],
            fc_dims: vec![5],
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid!("classifier needs at least 2 classes, got {}", self.num_classes));
        }
        if self.input_side == 0 {
            return Err(invalid!("classifier input side must be positive"));
        }
        let mut side = self.input_side;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.filter % 2 == 0 {
                return Err(invalid!("conv{}: filter {} must be odd", i + 1, b.filter));
            }
            if b.channels == 0 {
                return Err(invalid!("conv{}: zero channels", i + 1));
            }
            if b.pool {
                if side < 2 {
                    return Err(invalid!("conv{}: feature map too small to pool", i + 1));
                }
                side /= 2;
            }
        }
        if self.fc_dims.contains(&0) {
            return Err(invalid!("fully-connected widths must be positive"));
        }
        Ok(())
    }

    /// Length of the flattened feature vector entering the first FC layer.
    pub fn flat_features(&self) -> usize {
        let mut side = self.input_side;
        let mut channels = imageops::CHANNELS;
        for b in &self.conv_blocks {
            channels = b.channels;
            if b.pool {
                side /= 2;
            }
        }
        channels * side * side
    }

    /// Group names in layer order: `conv1..convK`, `fc1..fcM`, `fc_last`.
    pub fn group_names(&self) -> Vec<String> {
        (1..=self.conv_blocks.len())
            .map(|i| format!("conv{i}"))
            .chain((1..=self.fc_dims.len()).map(|i| format!("fc{i}")))
            .chain(std::iter::once(FC_LAST.to_string()))
            .collect()
    }
}

/// Multiplier presets for the classifier groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Everything but `fc_last` frozen at (0, 0); `fc_last` at (1, 1).
    FrozenHead,
    /// Everything at (0.1, 0) except `fc_last` at (1, 1).
    FinetuneAll,
    /// Everything at (1, 1); used when training the classifier from scratch.
    Full,
}

impl Schedule {
    /// `(lr_mult, wd_mult)` for a group under this schedule.
    pub fn multipliers(self, group: &str) -> (f64, f64) {
        if group == FC_LAST {
            return (1.0, 1.0);
        }
        match self {
            Schedule::FrozenHead => (0.0, 0.0),
            Schedule::FinetuneAll => (0.1, 0.0),
            Schedule::Full => (1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    params: ParamSet<T>,
}

impl<T: Real> Classifier<T> {
    /// He-normal weights (std `sqrt(2/fan_in)`), zero biases, schedule
    /// [`Schedule::Full`].
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed, stream::CLF_INIT);
        let mut he = |shape: &[usize], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
        };
        let mut params = ParamSet::new();
        let mut in_ch = imageops::CHANNELS;
        for (i, b) in config.conv_blocks.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let fan_in = in_ch * b.filter * b.filter;
            params.add_group(
                name.clone(),
                vec![
                    (format!("{name}.weight"), he(&[b.channels, in_ch, b.filter, b.filter], fan_in)),
                    (format!("{name}.bias"), Tensor::zeros(&[b.channels])),
                ],
                1.0,
                1.0,
            );
            in_ch = b.channels;
        }
        let mut in_dim = config.flat_features();
        let fc_names = (1..=config.fc_dims.len()).map(|i| format!("fc{i}"));
        let widths = config.fc_dims.iter().copied().chain(std::iter::once(config.num_classes));
        for (name, out_dim) in fc_names.chain(std::iter::once(FC_LAST.to_string())).zip(widths) {
            params.add_group(
                name.clone(),
                vec![
                    (format!("{name}.weight"), he(&[out_dim, in_dim], in_dim)),
                    (format!("{name}.bias"), Tensor::zeros(&[out_dim])),
                ],
                1.0,
                1.0,
            );
            in_dim = out_dim;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_schedule(&mut self, schedule: Schedule) {
        for name in self.config.group_names() {
            let (lr, wd) = schedule.multipliers(&name);
            self.params
                .set_multipliers(&name, lr, wd)
                .expect("group names come from the config");
        }
    }

    /// The table a schedule should produce, for auditing.
    pub fn expected_multipliers(&self, schedule: Schedule) -> Vec<Multipliers> {
        self.config
            .group_names()
            .into_iter()
            .map(|group| {
                let (lr_mult, wd_mult) = schedule.multipliers(&group);
                Multipliers {
                    group,
                    lr_mult,
                    wd_mult,
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_params(path, &self.params)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        checkpoint::load_params(path, &mut self.params)
    }

    /// Input to `fc_last` (after the hidden FC layers and their ReLUs).
    pub fn features(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let side = self.config.input_side;
        if s.len() != 4 || s[1] != imageops::CHANNELS || s[2] != side || s[3] != side {
            return Err(invalid!("classifier expects [N,3,{side},{side}] input, got {s:?}"));
        }
        let mut h = x;
        let mut p = 0;
        for b in &self.config.conv_blocks {
            h = g.conv2d(h, bound.get(p), bound.get(p + 1), b.filter / 2)?;
            h = g.relu(h)?;
            if b.pool {
                h = g.maxpool2d(h, 2, 2)?;
            }
            p += 2;
        }
        h = g.flatten(h)?;
        for _ in &self.config.fc_dims {
            h = g.linear(h, bound.get(p), bound.get(p + 1))?;
            h = g.relu(h)?;
            p += 2;
        }
        Ok(h)
    }

    /// Logits `[N, l]` (no softmax).
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.features(g, bound, x)?;
        let p = 2 * (self.config.conv_blocks.len() + self.config.fc_dims.len());
        g.linear(h, bound.get(p), bound.get(p + 1))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x)?))
    }
}

/// Row-wise argmax of an `[N, l]` tensor; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let l = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(l)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
