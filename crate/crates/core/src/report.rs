//! Turns training reports into CSV tables: accuracy per protocol, accuracy
//! per resolution and protocol, and per-epoch curves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::racnn::{Protocol, TrainingReport};

pub const PROTOCOL_TABLE: &str = "protocols.csv";
pub const RESOLUTION_TABLE: &str = "resolution_matrix.csv";
pub const CURVES: &str = "curves.csv";

/// Reads a report file and checks that it was written by this version.
pub fn read_report(path: &Path) -> Result<TrainingReport> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != crate::ARTIFACT_VERSION {
        return Err(Error::VersionMismatch {
            expected: crate::ARTIFACT_VERSION.to_string(),
            found: found.to_string(),
        });
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cell {
    pub seeds: Vec<u64>,
    pub final_accuracy: Vec<f64>,
    pub best_accuracy: Vec<f64>,
}

impl Cell {
    pub fn mean_final(&self) -> f64 {
        mean(&self.final_accuracy)
    }

    pub fn mean_best(&self) -> f64 {
        mean(&self.best_accuracy)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Reports grouped by (low_side, protocol), seeds in input order.
pub fn cells(reports: &[TrainingReport]) -> BTreeMap<(usize, Protocol), Cell> {
    let mut map: BTreeMap<(usize, Protocol), Cell> = BTreeMap::new();
    for r in reports {
        let c = map.entry((r.low_side, r.protocol)).or_default();
        c.seeds.push(r.seed);
        c.final_accuracy.push(r.final_accuracy);
        c.best_accuracy.push(r.best_accuracy);
    }
    map
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn protocol_table(reports: &[TrainingReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "low_side",
        "full_scale_side",
        "protocol",
        "schedule",
        "seeds",
        "mean_final_accuracy",
        "std_final_accuracy",
        "mean_best_accuracy",
    ])?;
    for ((low, protocol), cell) in cells(reports) {
        let sample = reports
            .iter()
            .find(|r| r.low_side == low && r.protocol == protocol)
            .expect("cell built from reports");
        let schedule = serde_json::to_value(sample.schedule)?;
        w.write_record([
            low.to_string(),
            sample.full_scale_side.map(|p| p.to_string()).unwrap_or_default(),
            protocol.name().to_string(),
            schedule.as_str().unwrap_or_default().to_string(),
            cell.seeds.len().to_string(),
            f(cell.mean_final()),
            f(std_dev(&cell.final_accuracy)),
            f(cell.mean_best()),
        ])?;
    }
    finish(w)
}

/// Rows are resolutions, columns are protocols; entries are mean final
/// accuracy over seeds, empty where a combination was not run.
pub fn resolution_matrix(reports: &[TrainingReport]) -> Result<String> {
    let cells = cells(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["low_side".to_string(), "full_scale_side".to_string()];
    header.extend(Protocol::ALL.iter().map(|p| p.name().to_string()));
    w.write_record(&header)?;
    let mut sides: Vec<usize> = reports.iter().map(|r| r.low_side).collect();
    sides.sort_unstable();
    sides.dedup();
    for low in sides {
        let full = reports
            .iter()
            .find(|r| r.low_side == low)
            .and_then(|r| r.full_scale_side)
            .map(|p| p.to_string())
            .unwrap_or_default();
        let mut row = vec![low.to_string(), full];
        row.extend(
            Protocol::ALL
                .iter()
                .map(|p| cells.get(&(low, *p)).map(|c| f(c.mean_final())).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    finish(w)
}

/// One row per (report, epoch).
pub fn curves(reports: &[TrainingReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["protocol", "low_side", "seed", "epoch", "train_loss", "test_accuracy"])?;
    for r in reports {
        for e in &r.epochs {
            w.write_record([
                r.protocol.name().to_string(),
                r.low_side.to_string(),
                r.seed.to_string(),
                e.epoch.to_string(),
                e.train_loss.map(f).unwrap_or_default(),
                f(e.test_accuracy),
            ])?;
        }
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

/// Builds all three tables in memory first, so nothing is written unless
/// every input is valid.
pub fn write_tables(reports: &[TrainingReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(invalid!("no reports given"));
    }
    let tables = [
        (PROTOCOL_TABLE, protocol_table(reports)?),
        (RESOLUTION_TABLE, resolution_matrix(reports)?),
        (CURVES, curves(reports)?),
    ];
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, text) in tables {
        let path = out_dir.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every path, then writes the tables.
pub fn report_files(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if paths.is_empty() {
        return Err(invalid!("no reports given"));
    }
    let reports: Vec<TrainingReport> = paths.iter().map(|p| read_report(p)).collect::<Result<_>>()?;
    write_tables(&reports, out_dir)
}
