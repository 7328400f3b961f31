//! Procedural fine-grained corpus.
//!
//! Every image shows the same coarse scene: a smooth background and a
//! centred rectangle, with random colours and up to two pixels of positional
//! jitter. The class is encoded only by where a small bright marker sits
//! inside the rectangle. Marker side and marker pitch scale with
//! `detail_scale`, so downsampling far enough blurs neighbouring classes into
//! each other.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetSplits, Manifest, ManifestEntry, Split, SplitTag};
use crate::error::{invalid, Result};
use crate::imageops::{ppm, Image};
use crate::rng::{derive_seed, seeded, stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub canvas: usize,
    pub seed: u64,
    /// Marker side as a fraction of the canvas, in (0,1].
    pub detail_scale: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum positional jitter of the whole scene, in pixels. Offsets are
    /// continuous and rendered with area coverage.
    pub jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 40,
            test_per_class: 100,
            canvas: 32,
            seed: 0,
            detail_scale: 0.11,
            noise: 0.03,
            jitter: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(invalid!("per-class counts must be positive"));
        }
        if !(self.detail_scale > 0.0 && self.detail_scale <= 1.0) {
            return Err(invalid!("detail_scale must lie in (0,1], got {}", self.detail_scale));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(invalid!("jitter must be a nonnegative number, got {}", self.jitter));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid!("noise must be a nonnegative number, got {}", self.noise));
        }
        let (side, pitch, cols, rows) = self.marker_grid();
        let span = (cols - 1) as f64 * pitch + side;
        let span_y = (rows - 1) as f64 * pitch + side;
        if span.max(span_y) + 6.0 + 2.0 * self.jitter > self.canvas as f64 {
            return Err(invalid!(
                "{} classes with marker side {side:.2} need a canvas larger than {}",
                self.num_classes,
                self.canvas
            ));
        }
        Ok(())
    }

    /// One image of `class`, drawn from its own stream; used for previews.
    pub fn sample(&self, class: usize, draw: u64) -> Result<Image> {
        self.validate()?;
        if class >= self.num_classes {
            return Err(invalid!("class {class} out of range for {} classes", self.num_classes));
        }
        let mut rng = seeded(derive_seed(self.seed, draw), stream::CORPUS);
        Ok(self.render(class, &mut rng))
    }

    pub fn class_name(&self, k: usize) -> String {
        format!("class_{k:02}")
    }

    /// Marker side and pitch between cells in pixels, grid columns and rows.
    fn marker_grid(&self) -> (f64, f64, usize, usize) {
        let side = self.detail_scale * self.canvas as f64;
        let pitch = 2.0 * side;
        let cols = (self.num_classes as f64).sqrt().ceil() as usize;
        let rows = self.num_classes.div_ceil(cols);
        (side, pitch, cols, rows)
    }

    fn render(&self, class: usize, rng: &mut Rng) -> Image {
        let s = self.canvas as f64;
        let (side, pitch, cols, rows) = self.marker_grid();
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.65..0.8));
        let tilt = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
        let obj: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.35));
        let mark = rng.gen_range(0.85..1.0);
        let (jy, jx) = if self.jitter > 0.0 {
            (rng.gen_range(-self.jitter..=self.jitter), rng.gen_range(-self.jitter..=self.jitter))
        } else {
            (0.0, 0.0)
        };

        let grid_h = (rows - 1) as f64 * pitch + side;
        let grid_w = (cols - 1) as f64 * pitch + side;
        let half = (grid_h.max(grid_w) / 2.0 + 3.0).round();
        let (cy, cx) = (s / 2.0 + jy, s / 2.0 + jx);
        let object = [cy - half, cy + half, cx - half, cx + half];
        let my = cy - grid_h / 2.0 + (class / cols) as f64 * pitch;
        let mx = cx - grid_w / 2.0 + (class % cols) as f64 * pitch;
        let marker = [my, my + side, mx, mx + side];

        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("finite std");
        Image::from_fn(self.canvas, self.canvas, |y, x| {
            let (fy, fx) = (y as f64, x as f64);
            let shade = tilt[0] * (fy / s - 0.5) + tilt[1] * (fx / s - 0.5);
            let a = coverage(object, fy, fx);
            let b = coverage(marker, fy, fx);
            std::array::from_fn::<f64, 3, _>(|c| {
                let v = bg[c] + shade;
                let v = v + a * (obj[c] - v);
                let v = v + b * (mark - v);
                let n = if self.noise > 0.0 { normal.sample(rng) } else { 0.0 };
                quantize(v + n)
            })
        })
    }
}

/// Area of pixel `(y, x)` covered by the rectangle `[top, bottom, left, right]`.
fn coverage(rect: [f64; 4], y: f64, x: f64) -> f64 {
    let overlap = |lo: f64, hi: f64, p: f64| (hi.min(p + 1.0) - lo.max(p)).max(0.0);
    overlap(rect[0], rect[1], y) * overlap(rect[2], rect[3], x)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders the corpus in memory. Images are quantized to 8 bits so that the
/// in-memory corpus equals what a PPM round trip would give.
pub fn synthesize(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let mut rng = seeded(spec.seed, stream::CORPUS);
    let mut train = Split::default();
    let mut test = Split::default();
    for (split, per_class) in [(&mut train, spec.train_per_class), (&mut test, spec.test_per_class)] {
        for class in 0..spec.num_classes {
            for _ in 0..per_class {
                split.images.push(spec.render(class, &mut rng));
                split.labels.push(class);
            }
        }
    }
    Ok(DatasetSplits {
        classes: (0..spec.num_classes).map(|k| spec.class_name(k)).collect(),
        train,
        test,
    })
}

/// Writes the corpus as PPM files plus `manifest.csv` and a `synthetic.json`
/// sidecar holding the generation parameters.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    let data = synthesize(spec)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::default();
    for (tag, split) in [(SplitTag::Train, &data.train), (SplitTag::Test, &data.test)] {
        let dir = match tag {
            SplitTag::Test => "test",
            _ => "train",
        };
        fs::create_dir_all(out_dir.join(dir))?;
        for (i, (img, &label)) in split.images.iter().zip(&split.labels).enumerate() {
            let rel = format!("{dir}/{}_{i:04}.ppm", data.classes[label]);
            ppm::write(&out_dir.join(&rel), img)?;
            manifest.entries.push(ManifestEntry {
                path: rel,
                label: data.classes[label].clone(),
                split: tag,
            });
        }
    }
    manifest.write(&out_dir.join("manifest.csv"))?;
    fs::write(out_dir.join("synthetic.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let spec = SyntheticSpec {
            num_classes: 2,
            train_per_class: 10,
            test_per_class: 10,
            ..Default::default()
        };
        let d = synthesize(&spec).unwrap();
        assert_eq!(d.train.len(), 20);
        assert_eq!(d.test.len(), 20);
        assert_eq!(d.canvas(), 32);
    }

    #[test]
    fn one_class_rejected() {
        let spec = SyntheticSpec {
            num_classes: 1,
            ..Default::default()
        };
        assert!(synthesize(&spec).is_err());
    }

    #[test]
    fn pixels_are_eight_bit() {
        let d = synthesize(&SyntheticSpec::default()).unwrap();
        for v in d.train.images[0].pixels() {
            assert_eq!((v * 255.0).round() / 255.0, *v);
        }
    }
}
