//! Finite-difference gradient checks for every differentiable operator and
//! for the composed networks, in f64.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::Result;
use crate::optim::Bound;
use crate::racnn::Racnn;
use crate::rng::{seeded, Rng};
use crate::srnet::{SrMode, SrStack, SrStackConfig};
use crate::tensor::{Graph, OpKind, Tensor, Var};

pub const DEFAULT_TOL: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that two gradients that are
/// both essentially zero compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub tol: f64,
    /// Random instances per operator.
    pub trials: usize,
    pub seed: u64,
    /// Coordinates probed per input tensor; larger tensors are subsampled.
    pub max_coords: usize,
    #[serde(skip)]
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            trials: 20,
            seed: 0,
            max_coords: 40,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub name: String,
    pub trials: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

struct Case<'a> {
    inputs: Vec<Tensor<f64>>,
    build: Box<Build<'a>>,
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Max relative error and number of probed coordinates for one case.
fn check_case(case: &Case, opts: &GradcheckOptions, rng: &mut Rng) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut probe = case.inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let n = case.inputs[i].numel();
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        let mut idx: Vec<usize> = (0..n).collect();
        if n > opts.max_coords {
            idx.shuffle(rng);
            idx.truncate(opts.max_coords);
        }
        for j in idx {
            let x0 = case.inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let fp = eval(case, &probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let fm = eval(case, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            coords += 1;
        }
    }
    Ok((worst, coords))
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Values bounded away from zero so that ReLU kinks stay out of reach of the
/// finite-difference step.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let mag = Uniform::new(0.05, 1.0);
    Tensor::from_fn(shape, |_| {
        let m = mag.sample(rng);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values with gaps far wider than the step, so that every pooling
/// window has a unique maximum.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    Tensor::new(shape.to_vec(), ranks.into_iter().map(|r| r as f64 / n as f64 - 0.5).collect())
        .expect("shape and length agree")
}

/// `sum(out ⊙ r)` with a fixed random `r`, so each output element gets its own
/// upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = seeded(rng_seed, 0x77);
    let r = normal(&mut rng, g.shape(out), 1.0);
    let r = g.input(r);
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn op_cases<'a>(name: &str, rng: &mut Rng) -> Case<'a> {
    let wseed: u64 = rng.gen();
    match name {
        "conv2d" => {
            let (n, c, k) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let f = *[1usize, 3, 5].choose(rng).expect("nonempty");
            let (h, w) = (rng.gen_range(f.max(3)..=6), rng.gen_range(f.max(3)..=6));
            let pad = rng.gen_range(0..=f / 2);
            Case {
                inputs: vec![normal(rng, &[n, c, h, w], 1.0), normal(rng, &[k, c, f, f], 0.5), normal(rng, &[k], 0.5)],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], pad)?;
                    weighted_sum(g, y, wseed)
                }),
            }
        }
        "relu" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=6)];
            Case {
                inputs: vec![away_from_zero(rng, &shape)],
                build: Box::new(move |g, v| {
                    let y = g.relu(v[0])?;
                    weighted_sum(g, y, wseed)
                }),
            }
        }
        "maxpool2d" => {
            let (k, stride) = *[(2usize, 2usize), (2, 1), (3, 2), (3, 3)].choose(rng).expect("nonempty");
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(k..=7), rng.gen_range(k..=7)];
            Case {
                inputs: vec![distinct(rng, &shape)],
                build: Box::new(move |g, v| {
                    let y = g.maxpool2d(v[0], k, stride)?;
                    weighted_sum(g, y, wseed)
                }),
            }
        }
        "linear" => {
            let (n, d, m) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4));
            Case {
                inputs: vec![normal(rng, &[n, d], 1.0), normal(rng, &[m, d], 1.0), normal(rng, &[m], 1.0)],
                build: Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    weighted_sum(g, y, wseed)
                }),
            }
        }
        "add" | "sub" | "mul" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let op = name.to_string();
            Case {
                inputs: vec![normal(rng, &shape, 1.0), normal(rng, &shape, 1.0)],
                build: Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    weighted_sum(g, y, wseed)
                }),
            }
        }
        "sum" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            Case {
                inputs: vec![normal(rng, &shape, 1.0)],
                build: Box::new(|g, v| g.sum(v[0])),
            }
        }
        "reshape" => {
            let (a, b) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
            Case {
                inputs: vec![normal(rng, &[a, b], 1.0)],
                build: Box::new(move |g, v| {
                    let y = g.reshape(v[0], &[b, a])?;
                    weighted_sum(g, y, wseed)
                }),
            }
        }
        "softmax_cross_entropy" => {
            let (n, l) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..l)).collect();
            Case {
                inputs: vec![normal(rng, &[n, l], 2.0)],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            }
        }
        "mse_loss" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            Case {
                inputs: vec![normal(rng, &shape, 1.0), normal(rng, &shape, 1.0)],
                build: Box::new(|g, v| g.mse_loss(v[0], v[1])),
            }
        }
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Operators checked one at a time, by their graph names.
pub const OPS: [&str; 11] = [
    "conv2d",
    "relu",
    "maxpool2d",
    "linear",
    "add",
    "sub",
    "mul",
    "sum",
    "reshape",
    "softmax_cross_entropy",
    "mse_loss",
];

/// Replaces every SR parameter with draws of std `std`, large enough for
/// gradients well above the relative-error floor.
fn randomize_sr(stack: &mut SrStack<f64>, rng: &mut Rng, std: f64) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = stack
        .params()
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        stack.params_mut().load(&name, normal(rng, &shape, std))?;
    }
    Ok(())
}

fn sr_case<'a>(mode: SrMode, rng: &mut Rng) -> Result<Case<'a>> {
    let mut stack = SrStack::<f64>::zeros(SrStackConfig::toy(), mode)?;
    randomize_sr(&mut stack, rng, 0.3)?;
    let mut inputs: Vec<Tensor<f64>> = stack.params().params().iter().map(|p| p.value.clone()).collect();
    let np = inputs.len();
    let lr = Tensor::from_fn(&[1, 3, 12, 12], |_| rng.gen_range(0.0..1.0));
    let hr = Tensor::from_fn(&[1, 3, 12, 12], |_| rng.gen_range(0.0..1.0));
    inputs.push(lr);
    Ok(Case {
        inputs,
        build: Box::new(move |g, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let hr = g.input(hr.clone());
            stack.loss(g, &bound, v[np], hr)
        }),
    })
}

fn classifier_case<'a>(rng: &mut Rng, seed: u64) -> Result<Case<'a>> {
    let clf = Classifier::<f64>::new(ClassifierConfig::micro(), seed)?;
    let mut inputs: Vec<Tensor<f64>> = clf.params().params().iter().map(|p| p.value.clone()).collect();
    let np = inputs.len();
    inputs.push(Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.0..1.0)));
    let labels = vec![0, 1];
    Ok(Case {
        inputs,
        build: Box::new(move |g, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let logits = clf.forward(g, &bound, v[np])?;
            g.softmax_cross_entropy(logits, &labels)
        }),
    })
}

fn racnn_case<'a>(rng: &mut Rng, seed: u64) -> Result<Case<'a>> {
    let mut sr = SrStack::<f64>::zeros(SrStackConfig::toy(), SrMode::Residual)?;
    randomize_sr(&mut sr, rng, 0.3)?;
    let model = Racnn::new(sr, Classifier::<f64>::new(ClassifierConfig::micro(), seed)?);
    let sr_params: Vec<Tensor<f64>> = model.sr.params().params().iter().map(|p| p.value.clone()).collect();
    let clf_params: Vec<Tensor<f64>> = model.clf.params().params().iter().map(|p| p.value.clone()).collect();
    let (ns, nc) = (sr_params.len(), clf_params.len());
    let mut inputs = sr_params;
    inputs.extend(clf_params);
    inputs.push(Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.0..1.0)));
    let labels = vec![1, 0];
    Ok(Case {
        inputs,
        build: Box::new(move |g, v| {
            let sb = Bound::from_vars(v[..ns].to_vec());
            let cb = Bound::from_vars(v[ns..ns + nc].to_vec());
            let logits = model.forward(g, &sb, &cb, v[ns + nc])?;
            g.softmax_cross_entropy(logits, &labels)
        }),
    })
}

fn run_named(
    name: &str,
    trials: usize,
    opts: &GradcheckOptions,
    rng: &mut Rng,
    mut make: impl FnMut(&mut Rng, usize) -> Result<Case<'static>>,
) -> Result<OpCheck> {
    let (mut worst, mut coords) = (0.0f64, 0usize);
    for t in 0..trials {
        let case = make(rng, t)?;
        let (w, c) = check_case(&case, opts, rng)?;
        worst = worst.max(w);
        coords += c;
    }
    Ok(OpCheck {
        name: name.to_string(),
        trials,
        coords,
        max_rel_err: worst,
        passed: worst < opts.tol,
    })
}

/// Runs the whole suite: each operator in isolation, the SR objective in
/// both modes, the micro classifier, and the micro RACNN end to end.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = seeded(opts.seed, 0x6C);
    let mut checks = Vec::new();
    for op in OPS {
        checks.push(run_named(op, opts.trials, opts, &mut rng, |r, _| Ok(op_cases(op, r)))?);
    }
    let model_trials = opts.trials.div_ceil(4).max(1);
    checks.push(run_named("sr_loss_residual", model_trials, opts, &mut rng, |r, _| {
        sr_case(SrMode::Residual, r)
    })?);
    checks.push(run_named("sr_loss_direct", model_trials, opts, &mut rng, |r, _| {
        sr_case(SrMode::Direct, r)
    })?);
    checks.push(run_named("classifier_micro", model_trials, opts, &mut rng, |r, t| {
        classifier_case(r, opts.seed.wrapping_add(t as u64))
    })?);
    checks.push(run_named("racnn_micro", model_trials, opts, &mut rng, |r, t| {
        racnn_case(r, opts.seed.wrapping_add(t as u64))
    })?);
    Ok(GradcheckReport { tol: opts.tol, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, -1e-12) < 1e-5);
        assert!((rel_err(1.1, 1.0) - 0.1 / 1.1).abs() < 1e-12);
    }
}
