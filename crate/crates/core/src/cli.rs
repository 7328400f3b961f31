//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation error (flags, configs, manifests,
//! report versions), 2 runtime error (I/O, training, failed gradient check).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::{self, load_dataset, Manifest, SyntheticSpec};
use crate::error::{invalid, Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::imageops::{self, ppm};
use crate::racnn::{self, predict_split, ExperimentSpec, Model, Protocol, Racnn};
use crate::srnet::{pretrain_sr, PretrainConfig, SrMode, SrStack, SrStackConfig};
use crate::tensor::OpKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "racnn", version, about = "Resolution-aware CNN experiments on a desk-scale corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus (PPM images, manifest.csv, synthetic.json).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Write a degraded copy of a corpus next to a copied manifest.
    Degrade {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the SR layers on the training split of a manifest.
    PretrainSr {
        #[command(flatten)]
        common: Common,
    },
    /// Train one protocol at one resolution.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train every protocol at every resolution of the ladder.
    Ladder {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending low sides.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        low_sides: Vec<usize>,
    },
    /// Evaluate checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classifier_checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = crate::gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the backward pass of one operator (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Turn report files into CSV tables.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
        reports: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    low_side: Option<usize>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    sr_checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| invalid!("--out is required"))
    }

    fn manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| invalid!("--manifest is required"))
    }

    fn config<C: serde::de::DeserializeOwned + Default>(&self) -> Result<C> {
        match &self.config {
            None => Ok(C::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
                    _ => e.into(),
                })?;
                serde_json::from_str(&text).map_err(|e| invalid!("{}: {e}", path.display()))
            }
        }
    }

    fn protocol(&self) -> Result<Option<Protocol>> {
        self.protocol
            .as_deref()
            .map(|s| Protocol::from_name(s).ok_or_else(|| invalid!("unknown protocol {s:?}; use baseline, g-racnn or p-racnn")))
            .transpose()
    }

    /// The experiment spec from `--config` with flag overrides applied.
    fn experiment(&self) -> Result<ExperimentSpec> {
        let mut spec: ExperimentSpec = self.config()?;
        if let Some(p) = self.protocol()? {
            spec.protocol = p;
        }
        if let Some(s) = self.low_side {
            spec.low_side = s;
        }
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
        }
        if let Some(e) = self.epochs {
            spec.epochs = e;
        }
        if let Some(p) = &self.sr_checkpoint {
            spec.sr_checkpoint = Some(p.clone());
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Configuration of `pretrain-sr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrPretrainSpec {
    pub sr_config: SrStackConfig,
    pub mode: SrMode,
    pub init_seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for SrPretrainSpec {
    fn default() -> Self {
        Self {
            sr_config: SrStackConfig::desk(),
            mode: SrMode::Residual,
            init_seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::InvalidManifest(_) | Error::VersionMismatch { .. } | Error::NotFound(_) => {
            EXIT_VALIDATION
        }
        _ => EXIT_RUNTIME,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RACNN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid!("RACNN_THREADS must be a positive integer, got {v:?}"))?;
        // a pool set up by an earlier call in the same process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| dispatch(cli.command));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Degrade { common } => degrade(&common),
        Command::PretrainSr { common } => pretrain(&common),
        Command::Train { common } => train(&common),
        Command::Ladder { common, low_sides } => ladder(&common, &low_sides),
        Command::Eval {
            common,
            classifier_checkpoint,
        } => eval(&common, classifier_checkpoint.as_deref()),
        Command::Gradcheck { tol, seed, inject_fault } => gradcheck(tol, seed, inject_fault.as_deref()),
        Command::Report { out, reports } => report(out.as_deref(), &reports),
    }
}

fn gen_data(c: &Common) -> Result<i32> {
    let mut spec: SyntheticSpec = c.config()?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = c.out()?;
    let m = data::generate_synthetic(&spec, out)?;
    println!("wrote {} images to {}", m.entries.len(), out.display());
    Ok(EXIT_OK)
}

fn degrade(c: &Common) -> Result<i32> {
    let low = c.low_side.ok_or_else(|| invalid!("--low-side is required"))?;
    if low == 0 {
        return Err(invalid!("--low-side must be positive"));
    }
    let (manifest_path, out) = (c.manifest()?, c.out()?);
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    for e in &manifest.entries {
        let img = ppm::read(&base.join(&e.path))?;
        let (h, w) = (img.height(), img.width());
        let lr = imageops::degrade_to(&img, low, low, h, w)?;
        let dst = out.join(&e.path);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent)?;
        }
        ppm::write(&dst, &lr)?;
    }
    manifest.write(&out.join("manifest.csv"))?;
    println!("degraded {} images through {low}x{low} into {}", manifest.entries.len(), out.display());
    Ok(EXIT_OK)
}

fn pretrain(c: &Common) -> Result<i32> {
    let mut spec: SrPretrainSpec = c.config()?;
    if let Some(s) = c.seed {
        spec.init_seed = s;
        spec.pretrain.sgd.seed = s;
    }
    if let Some(l) = c.low_side {
        spec.pretrain.low_side = l;
    }
    if let Some(e) = c.epochs {
        spec.pretrain.epochs = e;
    }
    spec.sr_config.validate()?;
    spec.pretrain.sgd.validate()?;
    let (manifest, out) = (c.manifest()?, c.out()?);
    let corpus = load_dataset(manifest, None)?;
    std::fs::create_dir_all(out)?;
    let mut stack = SrStack::<f32>::gaussian(spec.sr_config, spec.mode, spec.init_seed)?;
    let ckpt = out.join("sr.ckpt");
    let report = pretrain_sr(&mut stack, &corpus.train.images, &spec.pretrain, Some(&ckpt))?;
    std::fs::write(out.join("sr_pretrain.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(
        out.join("sr_pretrain.timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "wall_clock_seconds": report.wall_clock_seconds }))? + "\n",
    )?;
    for e in &report.epochs {
        println!(
            "epoch {:3}  loss {:.6}  held-out PSNR sr {} bicubic {} delta {:+.3} dB",
            e.epoch,
            e.train_loss,
            imageops::format_psnr(e.heldout_psnr_sr),
            imageops::format_psnr(e.heldout_psnr_bicubic),
            e.heldout_psnr_delta
        );
    }
    println!("wrote {}", ckpt.display());
    Ok(EXIT_OK)
}

fn save_model(dir: &Path, stem: &str, model: &Model<f32>) -> Result<()> {
    model.classifier().save(&dir.join(format!("{stem}.clf.ckpt")))?;
    if let Some(sr) = model.sr() {
        sr.save(&dir.join(format!("{stem}.sr.ckpt")))?;
    }
    Ok(())
}

fn train(c: &Common) -> Result<i32> {
    let spec = c.experiment()?;
    let (manifest, out) = (c.manifest()?, c.out()?);
    let hr = load_dataset(manifest, None)?;
    for (report, model) in racnn::train_models::<f32>(&spec, &hr)? {
        let path = racnn::write_report(out, &report)?;
        save_model(out, &report.file_stem(), &model)?;
        println!(
            "{} low_side {} seed {}: final {:.4} best {:.4} (epoch {})  -> {}",
            report.protocol,
            report.low_side,
            report.seed,
            report.final_accuracy,
            report.best_accuracy,
            report.best_epoch,
            path.display()
        );
    }
    Ok(EXIT_OK)
}

fn ladder(c: &Common, low_sides: &[usize]) -> Result<i32> {
    let spec = c.experiment()?;
    let (manifest, out) = (c.manifest()?, c.out()?);
    let hr = load_dataset(manifest, None)?;
    let reports = racnn::run_ladder::<f32>(&spec, low_sides, &hr)?;
    for r in &reports {
        racnn::write_report(out, r)?;
    }
    for path in crate::report::write_tables(&reports, out)? {
        println!("wrote {}", path.display());
    }
    print!("{}", crate::report::resolution_matrix(&reports)?);
    Ok(EXIT_OK)
}

fn eval(c: &Common, clf_ckpt: Option<&Path>) -> Result<i32> {
    let spec = c.experiment()?;
    let clf_ckpt = clf_ckpt.ok_or_else(|| invalid!("--classifier-checkpoint is required"))?;
    let manifest = c.manifest()?;
    let data = load_dataset(manifest, Some(spec.low_side))?;
    let mut clf = Classifier::<f32>::new(spec.classifier.clone(), 0)?;
    clf.load(clf_ckpt)?;
    let l = clf.num_classes();
    let preds = match &spec.sr_checkpoint {
        None => predict_split(&data.test, spec.eval_batch, |x| clf.predict(x))?,
        Some(path) => {
            let mut sr = SrStack::<f32>::zeros(spec.sr_config, SrMode::Residual)?;
            sr.load(path)?;
            let model = Racnn::new(sr, clf.clone());
            predict_split(&data.test, spec.eval_batch, |x| model.predict(x))?
        }
    };
    let acc = data::per_class_breakdown(&preds, &data.test.labels, l)?;
    let summary = serde_json::json!({
        "version": crate::ARTIFACT_VERSION,
        "low_side": spec.low_side,
        "with_sr": spec.sr_checkpoint.is_some(),
        "test_accuracy": acc.mean,
        "per_class": acc.per_class,
        "excluded_classes": acc.excluded,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("eval.json"), &text)?;
    }
    print!("{text}");
    Ok(EXIT_OK)
}

fn gradcheck(tol: f64, seed: u64, fault: Option<&str>) -> Result<i32> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(invalid!("--tol must be a positive number"));
    }
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| invalid!("unknown operator {name:?}")))
        .transpose()?;
    let opts = GradcheckOptions {
        tol,
        seed,
        fault,
        ..Default::default()
    };
    let report = run_gradcheck(&opts)?;
    for c in &report.checks {
        println!(
            "{:<24} trials {:>3}  coords {:>5}  max rel err {:.3e}  {}",
            c.name,
            c.trials,
            c.coords,
            c.max_rel_err,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("all gradients within {tol:e}");
        Ok(EXIT_OK)
    } else {
        println!("gradient check failed: {}", report.failures().join(", "));
        Ok(EXIT_RUNTIME)
    }
}

fn report(out: Option<&Path>, paths: &[PathBuf]) -> Result<i32> {
    let out = out.ok_or_else(|| invalid!("--out is required"))?;
    for path in crate::report::report_files(paths, out)? {
        println!("wrote {}", path.display());
    }
    Ok(EXIT_OK)
}
