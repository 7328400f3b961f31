//! Named parameters, parameter groups, and momentum SGD with per-group
//! learning-rate and weight-decay multipliers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// A trainable tensor plus its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    velocity: Option<Vec<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            velocity: None,
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(invalid!(
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                self.name,
                self.value.shape()
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(g.data()),
            slot => *slot = Some(g.clone()),
        }
        Ok(())
    }
}

/// A named set of parameters sharing learning-rate and weight-decay
/// multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    /// Indices into the owning [`ParamSet`].
    pub params: Vec<usize>,
    pub lr_mult: f64,
    pub wd_mult: f64,
}

impl ParamGroup {
    /// A group with both multipliers at zero is never touched by the optimizer.
    pub fn is_frozen(&self) -> bool {
        self.lr_mult == 0.0 && self.wd_mult == 0.0
    }
}

/// Effective multipliers of one group, as recorded in reports and audited
/// before each optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub group: String,
    pub lr_mult: f64,
    pub wd_mult: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub base_wd: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            base_wd: 0.0005,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(invalid!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.base_wd >= 0.0) {
            return Err(invalid!("base_wd must be nonnegative, got {}", self.base_wd));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0,1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a [`ParamSet`], by parameter index.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Ordered parameters partitioned into groups.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    groups: Vec<ParamGroup>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            groups: Vec::new(),
        }
    }

    /// Appends a group owning freshly added parameters. Returns the index of
    /// the first parameter added.
    pub fn add_group(
        &mut self,
        name: impl Into<String>,
        tensors: Vec<(String, Tensor<T>)>,
        lr_mult: f64,
        wd_mult: f64,
    ) -> usize {
        let first = self.params.len();
        let indices = (first..first + tensors.len()).collect();
        self.params
            .extend(tensors.into_iter().map(|(n, t)| Param::new(n, t)));
        self.groups.push(ParamGroup {
            name: name.into(),
            params: indices,
            lr_mult,
            wd_mult,
        });
        first
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn set_multipliers(&mut self, group: &str, lr_mult: f64, wd_mult: f64) -> Result<()> {
        if lr_mult < 0.0 || wd_mult < 0.0 {
            return Err(invalid!("multipliers must be nonnegative ({lr_mult}, {wd_mult})"));
        }
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| invalid!("no parameter group named {group}"))?;
        g.lr_mult = lr_mult;
        g.wd_mult = wd_mult;
        Ok(())
    }

    pub fn multipliers(&self) -> Vec<Multipliers> {
        self.groups
            .iter()
            .map(|g| Multipliers {
                group: g.name.clone(),
                lr_mult: g.lr_mult,
                wd_mult: g.wd_mult,
            })
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a graph leaf. Parameters of frozen groups
    /// are bound as constants so that backward skips their weight gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let mut trainable = vec![true; self.params.len()];
        for group in &self.groups {
            if group.is_frozen() {
                for &i in &group.params {
                    trainable[i] = false;
                }
            }
        }
        Bound(
            self.params
                .iter()
                .zip(trainable)
                .map(|(p, t)| g.leaf(p.value.clone(), t))
                .collect(),
        )
    }

    /// Binds every parameter as a trainable leaf regardless of group state.
    pub fn bind_all(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.param(p.value.clone())).collect())
    }

    /// Adds graph leaf gradients into the parameter gradient buffers.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(bound.vars()) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    /// Replaces a parameter value by name, checking the shape.
    pub fn load(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| invalid!("no parameter named {name}"))?;
        if p.value.shape() != value.shape() {
            return Err(invalid!(
                "parameter {name}: expected shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        p.velocity = None;
        Ok(())
    }

    /// Checks that groups partition the parameters.
    pub fn validate_partition(&self) -> Result<()> {
        let mut seen = vec![0usize; self.params.len()];
        for g in &self.groups {
            for &i in &g.params {
                *seen.get_mut(i).ok_or_else(|| invalid!("group {} references missing parameter {i}", g.name))? += 1;
            }
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(invalid!(
                "parameter {} belongs to {} groups",
                self.params[i].name,
                seen[i]
            ));
        }
        Ok(())
    }
}

/// One momentum-SGD update:
/// `v ← μ·v − lr·(grad + wd·θ)`, `θ ← θ + v`, with `lr = base_lr·lr_mult`
/// and `wd = base_wd·wd_mult` per group. Frozen groups are skipped entirely.
pub fn sgd_step<T: Real>(set: &mut ParamSet<T>, cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    let momentum = T::of(cfg.momentum);
    for group in &set.groups {
        if group.is_frozen() {
            continue;
        }
        let lr = T::of(cfg.base_lr * group.lr_mult);
        let wd = T::of(cfg.base_wd * group.wd_mult);
        for &i in &group.params {
            let p = &mut set.params[i];
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::State(format!("parameter {} has no gradient", p.name))
            })?;
            let velocity = p
                .velocity
                .get_or_insert_with(|| vec![T::zero(); p.value.numel()]);
            for ((theta, &gi), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(velocity.iter_mut())
            {
                *v = momentum * *v - lr * (gi + wd * *theta);
                *theta += *v;
            }
        }
    }
    Ok(())
}
