//! The resolution-aware network: SR layers in front of a classifier, the
//! three training protocols, and the resolution ladder.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_rows, Classifier, ClassifierConfig, Schedule};
use crate::data::{per_class_breakdown, DatasetSplits, Split};
use crate::error::{invalid, Error, Result};
use crate::optim::{sgd_step, Bound, Multipliers, SgdConfig};
use crate::rng::{self, stream};
use crate::srnet::{SrMode, SrStack, SrStackConfig, SR_MULTIPLIERS};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Classifier alone, fine-tuned on degraded images.
    Baseline,
    /// SR layers from Gaussian init, trained end to end.
    GRacnn,
    /// SR layers loaded from a pre-trained checkpoint, trained end to end.
    PRacnn,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Baseline, Protocol::GRacnn, Protocol::PRacnn];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Baseline => "baseline",
            Protocol::GRacnn => "g-racnn",
            Protocol::PRacnn => "p-racnn",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s || s.replace('-', "_") == p.name().replace('-', "_"))
    }

    pub fn uses_sr(self) -> bool {
        self != Protocol::Baseline
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Desk ladder rungs for a 32² canvas and the side lengths they stand in for
/// on a 227² canvas.
pub const LADDER: [(usize, usize); 3] = [(4, 25), (8, 50), (16, 100)];

pub fn full_scale_side(low_side: usize) -> Option<usize> {
    LADDER.iter().find(|(d, _)| *d == low_side).map(|(_, p)| *p)
}

/// SR stack followed by the classifier.
#[derive(Clone, Debug)]
pub struct Racnn<T> {
    pub sr: SrStack<T>,
    pub clf: Classifier<T>,
}

impl<T: Real> Racnn<T> {
    /// The SR stack is switched to residual mode.
    pub fn new(mut sr: SrStack<T>, clf: Classifier<T>) -> Self {
        sr.set_mode(SrMode::Residual);
        Self { sr, clf }
    }

    pub fn forward(&self, g: &mut Graph<T>, sr_bound: &Bound, clf_bound: &Bound, x: Var) -> Result<Var> {
        let y = self.sr.forward(g, sr_bound, x)?;
        let (ys, side) = (g.shape(y).to_vec(), self.clf.config().input_side);
        if ys[2] != side || ys[3] != side {
            return Err(invalid!(
                "SR output is {}x{} but the classifier expects {side}x{side}",
                ys[2],
                ys[3]
            ));
        }
        self.clf.forward(g, clf_bound, y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let sb = self.sr.params().bind(&mut g);
        let cb = self.clf.params().bind(&mut g);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, &sb, &cb, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x)?))
    }

    /// Effective multiplier table, SR groups first.
    pub fn multipliers(&self) -> Vec<Multipliers> {
        let mut m = self.sr.params().multipliers();
        m.extend(self.clf.params().multipliers());
        m
    }
}

/// Hyper-parameters for training the classifier on full-resolution images,
/// the stand-in for a pretrained backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierPretrain {
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
}

impl Default for ClassifierPretrain {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 16,
            sgd: SgdConfig {
                base_lr: 0.01,
                ..SgdConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    pub schedule: Schedule,
    pub low_side: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
    pub sr_config: SrStackConfig,
    pub sr_checkpoint: Option<PathBuf>,
    pub classifier: ClassifierConfig,
    /// Full-resolution classifier weights. Without it the classifier is
    /// trained on the full-resolution training split first, once per seed.
    pub classifier_checkpoint: Option<PathBuf>,
    pub classifier_pretrain: ClassifierPretrain,
    pub eval_batch: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::Baseline,
            schedule: Schedule::FrozenHead,
            low_side: 8,
            seeds: vec![0],
            epochs: 30,
            batch: 32,
            sgd: SgdConfig::default(),
            sr_config: SrStackConfig::desk(),
            sr_checkpoint: None,
            classifier: ClassifierConfig::default(),
            classifier_checkpoint: None,
            classifier_pretrain: ClassifierPretrain::default(),
            eval_batch: 64,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.low_side == 0 {
            return Err(invalid!("low_side must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid!("at least one seed is required"));
        }
        if self.batch == 0 || self.eval_batch == 0 || self.classifier_pretrain.batch == 0 {
            return Err(invalid!("batch sizes must be positive"));
        }
        if self.schedule == Schedule::Full {
            return Err(invalid!("the full schedule is for pre-training only; use frozen_head or finetune_all"));
        }
        if self.protocol == Protocol::PRacnn && self.sr_checkpoint.is_none() {
            return Err(invalid!("p-racnn requires an SR checkpoint"));
        }
        self.sgd.validate()?;
        self.classifier_pretrain.sgd.validate()?;
        self.sr_config.validate()?;
        self.classifier.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub test_accuracy: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub version: String,
    pub protocol: Protocol,
    pub schedule: Schedule,
    pub low_side: usize,
    pub canvas: usize,
    /// Side length on a 227² canvas that this rung stands in for.
    pub full_scale_side: Option<usize>,
    pub seed: u64,
    pub classes: Vec<String>,
    /// Classes without test items, left out of the accuracy mean.
    pub excluded_classes: Vec<usize>,
    pub multipliers: Vec<Multipliers>,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub spec: ExperimentSpec,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainingReport {
    /// Pretty JSON with a trailing newline; the byte-stable report file.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn timing_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "protocol": self.protocol,
            "low_side": self.low_side,
            "seed": self.seed,
            "wall_clock_seconds": self.wall_clock_seconds,
        }))? + "\n")
    }

    /// File stem used by the CLI, e.g. `p-racnn_s8_seed3`.
    pub fn file_stem(&self) -> String {
        format!("{}_s{}_seed{}", self.protocol.name(), self.low_side, self.seed)
    }
}

/// Predictions in batches of `batch`.
pub fn predict_split<T: Real>(split: &Split, batch: usize, f: impl Fn(&Tensor<T>) -> Result<Vec<usize>>) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut preds = Vec::with_capacity(split.len());
    for chunk in idx.chunks(batch.max(1)) {
        preds.extend(f(&split.batch(chunk)?)?);
    }
    Ok(preds)
}

/// Average per-class accuracy of `clf` on a split.
pub fn evaluate_classifier<T: Real>(clf: &Classifier<T>, split: &Split, batch: usize) -> Result<f64> {
    let preds = predict_split(split, batch, |x| clf.predict(x))?;
    Ok(per_class_breakdown(&preds, &split.labels, clf.num_classes())?.mean)
}

fn check_classes(clf: &ClassifierConfig, data: &DatasetSplits) -> Result<()> {
    if clf.num_classes != data.num_classes() {
        return Err(invalid!(
            "classifier has {} outputs but the corpus has {} classes",
            clf.num_classes,
            data.num_classes()
        ));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(invalid!("train and test splits must be nonempty"));
    }
    if data.canvas() != clf.input_side {
        return Err(invalid!(
            "images are {0}x{0} but the classifier expects {1}x{1}",
            data.canvas(),
            clf.input_side
        ));
    }
    Ok(())
}

/// Trains a freshly initialised classifier on full-resolution images with
/// every group at (1, 1).
pub fn pretrain_classifier<T: Real>(
    config: &ClassifierConfig,
    hp: &ClassifierPretrain,
    data: &DatasetSplits,
    seed: u64,
) -> Result<Classifier<T>> {
    check_classes(config, data)?;
    let mut clf = Classifier::<T>::new(config.clone(), seed)?;
    clf.set_schedule(Schedule::Full);
    let mut rng = rng::seeded(seed, stream::CLF_PRETRAIN);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch) {
            let mut g = Graph::new();
            let bound = clf.params().bind(&mut g);
            let x = g.input(data.train.batch(chunk)?);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let logits = clf.forward(&mut g, &bound, x)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite("classifier pre-training loss"));
            }
            g.backward(loss)?;
            let params = clf.params_mut();
            params.zero_grad();
            params.collect_grads(&g, &bound)?;
            sgd_step(params, &hp.sgd)?;
        }
    }
    Ok(clf)
}

/// The classifier a run starts from: loaded from the spec's checkpoint, or
/// pre-trained on the full-resolution split.
pub fn base_classifier<T: Real>(spec: &ExperimentSpec, hr: &DatasetSplits, seed: u64) -> Result<Classifier<T>> {
    match &spec.classifier_checkpoint {
        Some(path) => {
            let mut clf = Classifier::new(spec.classifier.clone(), seed)?;
            clf.load(path)?;
            Ok(clf)
        }
        None => pretrain_classifier(&spec.classifier, &spec.classifier_pretrain, hr, seed),
    }
}

/// Builds the SR stack a protocol starts from.
pub fn initial_sr<T: Real>(spec: &ExperimentSpec, seed: u64) -> Result<Option<SrStack<T>>> {
    match spec.protocol {
        Protocol::Baseline => Ok(None),
        Protocol::GRacnn => Ok(Some(SrStack::gaussian(spec.sr_config, SrMode::Residual, seed)?)),
        Protocol::PRacnn => {
            let path = spec
                .sr_checkpoint
                .as_deref()
                .ok_or_else(|| invalid!("p-racnn requires an SR checkpoint"))?;
            let mut sr = SrStack::zeros(spec.sr_config, SrMode::Residual)?;
            sr.load(path)?;
            Ok(Some(sr))
        }
    }
}

/// Multiplier table a protocol and schedule must run with.
pub fn declared_multipliers(protocol: Protocol, schedule: Schedule, clf: &ClassifierConfig) -> Vec<Multipliers> {
    let mut table = Vec::new();
    if protocol.uses_sr() {
        table.extend(SR_MULTIPLIERS.iter().map(|(g, lr, wd)| Multipliers {
            group: g.to_string(),
            lr_mult: *lr,
            wd_mult: *wd,
        }));
    }
    table.extend(clf.group_names().into_iter().map(|group| {
        let (lr_mult, wd_mult) = schedule.multipliers(&group);
        Multipliers {
            group,
            lr_mult,
            wd_mult,
        }
    }));
    table
}

/// A trained model: classifier alone or the full RACNN.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Baseline(Classifier<T>),
    Racnn(Racnn<T>),
}

impl<T: Real> Model<T> {
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        match self {
            Model::Baseline(c) => c.predict(x),
            Model::Racnn(r) => r.predict(x),
        }
    }

    pub fn classifier(&self) -> &Classifier<T> {
        match self {
            Model::Baseline(c) => c,
            Model::Racnn(r) => &r.clf,
        }
    }

    pub fn sr(&self) -> Option<&SrStack<T>> {
        match self {
            Model::Baseline(_) => None,
            Model::Racnn(r) => Some(&r.sr),
        }
    }

    fn multipliers(&self) -> Vec<Multipliers> {
        match self {
            Model::Baseline(c) => c.params().multipliers(),
            Model::Racnn(r) => r.multipliers(),
        }
    }

    fn loss(&self, g: &mut Graph<T>, x: &Tensor<T>, labels: &[usize]) -> Result<(Var, Option<Bound>, Bound)> {
        let xv = g.input(x.clone());
        let (logits, sb, cb) = match self {
            Model::Baseline(c) => {
                let cb = c.params().bind(g);
                (c.forward(g, &cb, xv)?, None, cb)
            }
            Model::Racnn(r) => {
                let sb = r.sr.params().bind(g);
                let cb = r.clf.params().bind(g);
                (r.forward(g, &sb, &cb, xv)?, Some(sb), cb)
            }
        };
        Ok((g.softmax_cross_entropy(logits, labels)?, sb, cb))
    }

    fn step(&mut self, g: &Graph<T>, sb: Option<&Bound>, cb: &Bound, sgd: &SgdConfig) -> Result<()> {
        let (sr, clf) = match self {
            Model::Baseline(c) => (None, c),
            Model::Racnn(r) => (Some(&mut r.sr), &mut r.clf),
        };
        if let (Some(sr), Some(sb)) = (sr, sb) {
            let p = sr.params_mut();
            p.zero_grad();
            p.collect_grads(g, sb)?;
            sgd_step(p, sgd)?;
        }
        let p = clf.params_mut();
        p.zero_grad();
        p.collect_grads(g, cb)?;
        sgd_step(p, sgd)
    }
}

/// Trains one protocol on an already degraded corpus, starting from `base`.
/// Evaluates on the test split before training and after every epoch.
pub fn train_run<T: Real>(
    spec: &ExperimentSpec,
    seed: u64,
    degraded: &DatasetSplits,
    base: &Classifier<T>,
) -> Result<(TrainingReport, Model<T>)> {
    spec.validate()?;
    check_classes(&spec.classifier, degraded)?;
    if base.config() != &spec.classifier {
        return Err(invalid!("base classifier config differs from the spec"));
    }
    let started = Instant::now();
    let mut clf = base.clone();
    clf.set_schedule(spec.schedule);
    let mut model = match initial_sr::<T>(spec, seed)? {
        None => Model::Baseline(clf),
        Some(sr) => Model::Racnn(Racnn::new(sr, clf)),
    };
    let declared = declared_multipliers(spec.protocol, spec.schedule, &spec.classifier);
    let sgd = SgdConfig { seed, ..spec.sgd.clone() };
    let l = spec.classifier.num_classes;

    let evaluate = |model: &Model<T>, epoch: usize, train_loss: Option<f64>| -> Result<(EpochRecord, Vec<usize>)> {
        let preds = predict_split(&degraded.test, spec.eval_batch, |x| model.predict(x))?;
        let acc = per_class_breakdown(&preds, &degraded.test.labels, l)?;
        Ok((
            EpochRecord {
                epoch,
                train_loss,
                test_accuracy: acc.mean,
                per_class: acc.per_class,
            },
            acc.excluded,
        ))
    };

    let (first, excluded) = evaluate(&model, 0, None)?;
    let mut records = vec![first];
    let mut rng = rng::seeded(seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..degraded.train.len()).collect();
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(spec.batch) {
            if model.multipliers() != declared {
                return Err(Error::State(format!(
                    "multiplier table drifted from the {} / {:?} declaration",
                    spec.protocol, spec.schedule
                )));
            }
            let x = degraded.train.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| degraded.train.labels[i]).collect();
            let mut g = Graph::new();
            let (loss, sb, cb) = model.loss(&mut g, &x, &labels)?;
            let v = g.value(loss).item().as_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += v;
            batches += 1;
            g.backward(loss)?;
            model.step(&g, sb.as_ref(), &cb, &sgd)?;
        }
        records.push(evaluate(&model, epoch, Some(loss_sum / batches as f64))?.0);
    }

    let final_accuracy = records.last().expect("epoch 0 recorded").test_accuracy;
    let best = records
        .iter()
        .fold(&records[0], |b, r| if r.test_accuracy > b.test_accuracy { r } else { b });
    let report = TrainingReport {
        version: crate::ARTIFACT_VERSION.to_string(),
        protocol: spec.protocol,
        schedule: spec.schedule,
        low_side: spec.low_side,
        canvas: degraded.canvas(),
        full_scale_side: full_scale_side(spec.low_side),
        seed,
        classes: degraded.classes.clone(),
        excluded_classes: excluded,
        multipliers: model.multipliers(),
        final_accuracy,
        best_accuracy: best.test_accuracy,
        best_epoch: best.epoch,
        epochs: records,
        spec: ExperimentSpec {
            seeds: vec![seed],
            ..spec.clone()
        },
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((report, model))
}

/// Runs `spec` once per seed on the full-resolution corpus `hr`, degraded to
/// `spec.low_side`.
pub fn train<T: Real>(spec: &ExperimentSpec, hr: &DatasetSplits) -> Result<Vec<TrainingReport>> {
    Ok(train_models::<T>(spec, hr)?.into_iter().map(|(r, _)| r).collect())
}

/// As [`train`], also returning the trained models.
pub fn train_models<T: Real>(spec: &ExperimentSpec, hr: &DatasetSplits) -> Result<Vec<(TrainingReport, Model<T>)>> {
    spec.validate()?;
    check_classes(&spec.classifier, hr)?;
    let degraded = hr.degraded(spec.low_side)?;
    spec.seeds
        .iter()
        .map(|&seed| {
            let base = base_classifier::<T>(spec, hr, seed)?;
            train_run(spec, seed, &degraded, &base)
        })
        .collect()
}

/// Baseline, g-RACNN and p-RACNN at every rung of `low_sides`, for every
/// seed of `base_spec`. p-RACNN uses the single SR checkpoint of the spec at
/// every rung. Reports are ordered by seed, rung, protocol.
pub fn run_ladder<T: Real>(base_spec: &ExperimentSpec, low_sides: &[usize], hr: &DatasetSplits) -> Result<Vec<TrainingReport>> {
    if low_sides.is_empty() {
        return Err(invalid!("ladder needs at least one resolution"));
    }
    if low_sides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid!("ladder resolutions must be strictly ascending, got {low_sides:?}"));
    }
    if base_spec.sr_checkpoint.is_none() {
        return Err(invalid!("the ladder runs p-racnn and needs an SR checkpoint"));
    }
    check_classes(&base_spec.classifier, hr)?;
    let rungs: Vec<DatasetSplits> = low_sides.iter().map(|&s| hr.degraded(s)).collect::<Result<_>>()?;
    let mut reports = Vec::new();
    for &seed in &base_spec.seeds {
        let base = base_classifier::<T>(base_spec, hr, seed)?;
        for (&low_side, degraded) in low_sides.iter().zip(&rungs) {
            for protocol in Protocol::ALL {
                let spec = ExperimentSpec {
                    protocol,
                    low_side,
                    ..base_spec.clone()
                };
                reports.push(train_run(&spec, seed, degraded, &base)?.0);
            }
        }
    }
    Ok(reports)
}

/// Writes `<stem>.json` and `<stem>.timing.json` into `dir`.
pub fn write_report(dir: &Path, report: &TrainingReport) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", report.file_stem()));
    std::fs::write(&path, report.to_json()?)?;
    std::fs::write(dir.join(format!("{}.timing.json", report.file_stem())), report.timing_json()?)?;
    Ok(path)
}
