//! CSV manifests (`path,label,split`) and split loading.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imageops::{self, batch_tensor, Image};
use crate::tensor::{Real, Tensor};

pub const MANIFEST_HEADER: [&str; 3] = ["path", "label", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    /// Reserved; loaded as training data.
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    pub split: SplitTag,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Class names in sorted order; the position is the class index.
    pub fn classes(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.classes().iter().position(|c| c == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidManifest("no entries".into()));
        }
        for class in self.classes() {
            if !self
                .entries
                .iter()
                .any(|e| e.label == class && e.split == SplitTag::Test)
            {
                return Err(Error::InvalidManifest(format!("class {class:?} has no test entry")));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut reader = csv::Reader::from_reader(file);
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::InvalidManifest(format!(
                "header must be \"path,label,split\", got {:?}",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for (line, row) in reader.deserialize::<ManifestEntry>().enumerate() {
            entries.push(row.map_err(|e| Error::InvalidManifest(format!("row {}: {e}", line + 2)))?);
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Images and class indices of one split, in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tensor<T: Real>(&self) -> Result<Tensor<T>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let imgs: Vec<&Image> = indices.iter().map(|&i| &self.images[i]).collect();
        batch_tensor(&imgs)
    }

    pub fn map_images(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Split> {
        Ok(Split {
            images: self.images.iter().map(f).collect::<Result<_>>()?,
            labels: self.labels.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub classes: Vec<String>,
    pub train: Split,
    pub test: Split,
}

impl DatasetSplits {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Side of the (square) canvas.
    pub fn canvas(&self) -> usize {
        self.train.images.first().map(|i| i.height()).unwrap_or(0)
    }

    /// Every image degraded through `low_side²` and back to the canvas size.
    pub fn degraded(&self, low_side: usize) -> Result<DatasetSplits> {
        let f = |img: &Image| imageops::degrade_to(img, low_side, low_side, img.height(), img.width());
        Ok(DatasetSplits {
            classes: self.classes.clone(),
            train: self.train.map_images(f)?,
            test: self.test.map_images(f)?,
        })
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

/// Loads a manifest and its images. Relative paths resolve against the
/// manifest's directory. With `degrade_low_side`, every image passes through
/// the bicubic degradation before being returned.
pub fn load_dataset(manifest_path: &Path, degrade_low_side: Option<usize>) -> Result<DatasetSplits> {
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate()?;
    let classes = manifest.classes();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut train = Split::default();
    let mut test = Split::default();
    let mut dims = None;
    for e in &manifest.entries {
        let img = imageops::ppm::read(&resolve(base, &e.path))?;
        let d = (img.height(), img.width());
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(invalid!(
                    "{}: image is {}x{} but the corpus canvas is {}x{}",
                    e.path,
                    d.0,
                    d.1,
                    prev.0,
                    prev.1
                ))
            }
            _ => {}
        }
        let img = match degrade_low_side {
            Some(low) => imageops::degrade_to(&img, low, low, d.0, d.1)?,
            None => img,
        };
        let label = classes.binary_search(&e.label).expect("label taken from manifest");
        let split = if e.split == SplitTag::Test { &mut test } else { &mut train };
        split.images.push(img);
        split.labels.push(label);
    }
    Ok(DatasetSplits { classes, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::ppm;

    fn entry(path: &str, label: &str, split: SplitTag) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            label: label.into(),
            split,
        }
    }

    #[test]
    fn classes_sorted() {
        let m = Manifest {
            entries: vec![
                entry("a", "zebra", SplitTag::Train),
                entry("b", "apple", SplitTag::Test),
                entry("c", "mango", SplitTag::Train),
            ],
        };
        assert_eq!(m.classes(), ["apple", "mango", "zebra"]);
        assert_eq!(m.label_index("zebra"), Some(2));
    }

    #[test]
    fn class_without_test_entry_is_invalid() {
        let m = Manifest {
            entries: vec![entry("a", "x", SplitTag::Train), entry("b", "x", SplitTag::Val)],
        };
        assert!(matches!(m.validate(), Err(Error::InvalidManifest(_))));
    }

    #[test]
    fn header_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "file,class,split\na.ppm,x,train\n").unwrap();
        assert!(matches!(Manifest::read(&p), Err(Error::InvalidManifest(_))));
    }

    #[test]
    fn missing_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "path,label,split\nmissing.ppm,x,train\nmissing2.ppm,x,test\n").unwrap();
        match load_dataset(&p, None) {
            Err(Error::NotFound(path)) => assert!(path.ends_with("missing.ppm")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn three_classes_load_in_sorted_order_and_val_is_train() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::default();
        for (i, label) in ["c", "a", "b"].iter().enumerate() {
            for split in [SplitTag::Train, SplitTag::Test, SplitTag::Val] {
                let name = format!("{label}_{split:?}.ppm");
                let img = Image::filled(4, 4, [i as f64 / 4.0, 0.0, 1.0]);
                ppm::write(&dir.path().join(&name), &img).unwrap();
                m.entries.push(entry(&name, label, split));
            }
        }
        let mp = dir.path().join("manifest.csv");
        m.write(&mp).unwrap();
        let d = load_dataset(&mp, None).unwrap();
        assert_eq!(d.classes, ["a", "b", "c"]);
        assert_eq!(d.train.labels, vec![2, 2, 0, 0, 1, 1]);
        assert_eq!(d.test.labels, vec![2, 0, 1]);
        let degraded = load_dataset(&mp, Some(4)).unwrap();
        for (a, b) in degraded.train.images.iter().zip(&d.train.images) {
            for (p, q) in a.pixels().iter().zip(b.pixels()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
