//! Three-layer convolutional super-resolution stack.
//!
//! `g(x) = conv3(relu(conv2(relu(conv1(x)))))`, all convolutions padded to
//! preserve spatial size. In residual mode the stack outputs `x + g(x)` and
//! is trained on the residual `hr − lr`; in direct mode it outputs `g(x)` and
//! is trained on `hr`.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{invalid, Result};
use crate::imageops::{self, batch_tensor, extract_patches, unbatch_tensor, Image, PatchPair};
use crate::optim::{sgd_step, Bound, Multipliers, ParamSet, SgdConfig};
use crate::rng::{self, stream};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Multipliers `(lr_mult, wd_mult)` of the three SR layers.
pub const SR_MULTIPLIERS: [(&str, f64, f64); 3] =
    [("sconv1", 1.0, 0.1), ("sconv2", 1.0, 0.1), ("sconv3", 0.1, 0.1)];

/// Standard deviation of the Gaussian weight initialisation.
pub const GAUSSIAN_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrStackConfig {
    pub f1: usize,
    pub n1: usize,
    pub f2: usize,
    pub n2: usize,
    pub f3: usize,
    pub n3: usize,
}

impl Default for SrStackConfig {
    /// 9×9×64 → 5×5×32 → 5×5×3.
    fn default() -> Self {
        Self {
            f1: 9,
            n1: 64,
            f2: 5,
            n2: 32,
            f3: 5,
            n3: 3,
        }
    }
}

impl SrStackConfig {
    /// Reduced stack used by the CPU-scale experiment presets.
    pub fn desk() -> Self {
        Self {
            f1: 5,
            n1: 32,
            f2: 3,
            n2: 16,
            f3: 3,
            n3: 3,
        }
    }

    /// Tiny stack for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            f1: 3,
            n1: 4,
            f2: 3,
            n2: 3,
            f3: 3,
            n3: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("f1", self.f1), ("f2", self.f2), ("f3", self.f3)] {
            if f % 2 == 0 {
                return Err(invalid!("SR filter size {name}={f} must be odd"));
            }
        }
        if self.n1 == 0 || self.n2 == 0 {
            return Err(invalid!("SR hidden channel counts must be positive"));
        }
        if self.n3 != imageops::CHANNELS {
            return Err(invalid!("SR output channels n3 must be 3, got {}", self.n3));
        }
        Ok(())
    }

    fn layers(&self) -> [(usize, usize, usize); 3] {
        [
            (self.n1, imageops::CHANNELS, self.f1),
            (self.n2, self.n1, self.f2),
            (self.n3, self.n2, self.f3),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrMode {
    /// Output `x + g(x)`, trained on `hr − lr`.
    Residual,
    /// Output `g(x)`, trained on `hr`.
    Direct,
}

#[derive(Clone, Debug)]
pub struct SrStack<T> {
    config: SrStackConfig,
    mode: SrMode,
    params: ParamSet<T>,
}

impl<T: Real> SrStack<T> {
    fn build(config: SrStackConfig, mode: SrMode, mut weight: impl FnMut(usize, &[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (layer, ((name, lr, wd), (k, c, f))) in SR_MULTIPLIERS.iter().zip(config.layers()).enumerate() {
            params.add_group(
                *name,
                vec![
                    (format!("{name}.weight"), weight(layer, &[k, c, f, f])),
                    (format!("{name}.bias"), Tensor::zeros(&[k])),
                ],
                *lr,
                *wd,
            );
        }
        Ok(Self { config, mode, params })
    }

    /// Zero-mean Gaussian weights with std [`GAUSSIAN_INIT_STD`], zero biases.
    pub fn gaussian(config: SrStackConfig, mode: SrMode, seed: u64) -> Result<Self> {
        let mut rng = rng::seeded(seed, stream::SR_INIT);
        let normal = Normal::new(0.0, GAUSSIAN_INIT_STD).expect("valid std");
        Self::build(config, mode, |_, shape| {
            Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
        })
    }

    /// All weights and biases zero.
    pub fn zeros(config: SrStackConfig, mode: SrMode) -> Result<Self> {
        Self::build(config, mode, |_, shape| Tensor::zeros(shape))
    }

    pub fn config(&self) -> &SrStackConfig {
        &self.config
    }

    pub fn mode(&self) -> SrMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: SrMode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Zeroes every weight and bias of one layer (0-based).
    pub fn zero_layer(&mut self, layer: usize) {
        for p in &mut self.params.params_mut()[2 * layer..2 * layer + 2] {
            p.value.fill(T::zero());
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_params(path, &self.params)
    }

    /// Loads `sconv1..3` by name; shapes must match this stack's config.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        checkpoint::load_params(path, &mut self.params)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != imageops::CHANNELS {
            return Err(invalid!("SR input must be [N,3,H,W], got {s:?}"));
        }
        if s[2] < self.config.f1 || s[3] < self.config.f1 {
            return Err(invalid!(
                "SR input {}x{} is smaller than the first filter ({})",
                s[2],
                s[3],
                self.config.f1
            ));
        }
        Ok(())
    }

    /// The convolutional branch `g(x)` alone.
    pub fn branch(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let [f1, f2, f3] = [self.config.f1, self.config.f2, self.config.f3];
        let h = g.conv2d(x, bound.get(0), bound.get(1), f1 / 2)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, bound.get(2), bound.get(3), f2 / 2)?;
        let h = g.relu(h)?;
        g.conv2d(h, bound.get(4), bound.get(5), f3 / 2)
    }

    /// Network output; not clamped.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let r = self.branch(g, bound, x)?;
        match self.mode {
            SrMode::Residual => g.add(x, r),
            SrMode::Direct => Ok(r),
        }
    }

    /// Objective on a batch: residual mode `0.5·mean‖(hr − lr) − g(lr)‖²`,
    /// direct mode `0.5·mean‖hr − g(lr)‖²`.
    pub fn loss(&self, g: &mut Graph<T>, bound: &Bound, lr: Var, hr: Var) -> Result<Var> {
        if g.shape(lr) != g.shape(hr) {
            return Err(invalid!(
                "SR pair shape mismatch: lr {:?} vs hr {:?}",
                g.shape(lr),
                g.shape(hr)
            ));
        }
        let pred = self.branch(g, bound, lr)?;
        let target = match self.mode {
            SrMode::Residual => g.sub(hr, lr)?,
            SrMode::Direct => hr,
        };
        g.mse_loss(pred, target)
    }

    /// Records the loss of a batch of patch pairs into `g`.
    pub fn pair_loss(&self, g: &mut Graph<T>, bound: &Bound, pairs: &[&PatchPair]) -> Result<Var> {
        if pairs.is_empty() {
            return Err(invalid!("SR loss needs a nonempty batch"));
        }
        for p in pairs {
            if (p.lr.height(), p.lr.width()) != (p.hr.height(), p.hr.width()) {
                return Err(invalid!("patch pair shapes differ"));
            }
        }
        let lr: Vec<&Image> = pairs.iter().map(|p| &p.lr).collect();
        let hr: Vec<&Image> = pairs.iter().map(|p| &p.hr).collect();
        let lr = g.input(batch_tensor(&lr)?);
        let hr = g.input(batch_tensor(&hr)?);
        self.loss(g, bound, lr, hr)
    }

    /// Forward pass outside of training.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }

    /// Super-resolves one image; the output is clamped to `[0,1]`.
    pub fn enhance(&self, img: &Image) -> Result<Image> {
        let y = self.infer(&batch_tensor(&[img])?)?;
        Ok(unbatch_tensor(&y)?.remove(0))
    }
}

/// Hyper-parameters of SR pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub low_side: usize,
    pub patch: usize,
    pub stride: usize,
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            low_side: 8,
            patch: 16,
            stride: 8,
            epochs: 20,
            batch: 16,
            sgd: SgdConfig {
                base_lr: DEFAULT_PRETRAIN_LR,
                ..SgdConfig::default()
            },
        }
    }
}

/// Base learning rate for SR pre-training. The objective is a per-pixel mean
/// and the layers start at std 0.01, so small rates stay on the plateau
/// around the zero residual for hundreds of epochs.
pub const DEFAULT_PRETRAIN_LR: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_psnr_sr: f64,
    pub heldout_psnr_bicubic: f64,
    /// Mean over held-out images of `PSNR(sr) − PSNR(bicubic)`.
    pub heldout_psnr_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrPretrainReport {
    pub version: String,
    pub config: PretrainConfig,
    pub sr_config: SrStackConfig,
    pub mode: SrMode,
    pub multipliers: Vec<Multipliers>,
    pub train_images: usize,
    pub heldout_images: usize,
    /// Held-out images skipped because their bicubic PSNR is infinite.
    pub heldout_skipped: usize,
    pub patches_per_epoch: usize,
    pub epochs: Vec<SrEpoch>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Size of the held-out tail used for PSNR reporting (last 10% by order).
pub fn heldout_len(corpus_len: usize) -> usize {
    if corpus_len < 2 {
        0
    } else {
        (corpus_len / 10).max(1)
    }
}

/// Mean PSNR of SR output and of the bicubic input over images whose bicubic
/// PSNR is finite. Returns `(sr, bicubic, delta, skipped)`.
pub fn psnr_gain<T: Real>(stack: &SrStack<T>, images: &[Image], low_side: usize) -> Result<(f64, f64, f64, usize)> {
    let (mut sr_sum, mut bic_sum, mut n, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    for img in images {
        let lr = imageops::degrade_to(img, low_side, low_side, img.height(), img.width())?;
        let bic = imageops::psnr(&lr, img)?;
        if bic.is_infinite() {
            skipped += 1;
            continue;
        }
        let sr = imageops::psnr(&stack.enhance(&lr)?, img)?;
        // a perfect reconstruction of a non-trivial image: cap for averaging
        let sr = sr.min(100.0);
        sr_sum += sr;
        bic_sum += bic;
        n += 1;
    }
    if n == 0 {
        return Ok((f64::NAN, f64::NAN, f64::NAN, skipped));
    }
    let (sr, bic) = (sr_sum / n as f64, bic_sum / n as f64);
    Ok((sr, bic, sr - bic, skipped))
}

/// Trains the SR layers on patch pairs cut from `corpus` with the fixed SR
/// group multipliers. The last 10% of the corpus is held out for PSNR
/// reporting. Writes a checkpoint when `checkpoint_path` is given.
pub fn pretrain_sr<T: Real>(
    stack: &mut SrStack<T>,
    corpus: &[Image],
    hp: &PretrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<SrPretrainReport> {
    if corpus.is_empty() {
        return Err(invalid!("SR pre-training corpus is empty"));
    }
    if hp.batch == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    if hp.low_side == 0 {
        return Err(invalid!("low_side must be positive"));
    }
    hp.sgd.validate()?;
    let started = Instant::now();

    for (name, lr, wd) in SR_MULTIPLIERS {
        stack.params.set_multipliers(name, lr, wd)?;
    }

    let n_hold = heldout_len(corpus.len());
    let (train, heldout) = corpus.split_at(corpus.len() - n_hold);
    let mut pairs = Vec::new();
    for img in train {
        pairs.extend(extract_patches(img, hp.patch, hp.stride, hp.low_side)?);
    }

    let mut rng = rng::seeded(hp.sgd.seed, stream::SR_PRETRAIN);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epochs = Vec::with_capacity(hp.epochs);
    let mut skipped = 0;
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch) {
            let batch: Vec<&PatchPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut g = Graph::new();
            let bound = stack.params.bind(&mut g);
            let loss = stack.pair_loss(&mut g, &bound, &batch)?;
            loss_sum += g.value(loss).item().as_f64();
            batches += 1;
            g.backward(loss)?;
            stack.params.zero_grad();
            stack.params.collect_grads(&g, &bound)?;
            sgd_step(&mut stack.params, &hp.sgd)?;
        }
        let (sr, bic, delta, sk) = psnr_gain(stack, heldout, hp.low_side)?;
        skipped = sk;
        epochs.push(SrEpoch {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            heldout_psnr_sr: sr,
            heldout_psnr_bicubic: bic,
            heldout_psnr_delta: delta,
        });
    }

    if let Some(path) = checkpoint_path {
        stack.save(path)?;
    }

    Ok(SrPretrainReport {
        version: crate::ARTIFACT_VERSION.to_string(),
        config: hp.clone(),
        sr_config: stack.config,
        mode: stack.mode,
        multipliers: stack.params.multipliers(),
        train_images: train.len(),
        heldout_images: heldout.len(),
        heldout_skipped: skipped,
        patches_per_epoch: pairs.len(),
        epochs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}
