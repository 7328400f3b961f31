//! RGB images, bicubic resampling, degradation, patch pairs, PSNR, PPM I/O.
//!
//! Images are stored row-major with interleaved channels (`HWC`), values in
//! `[0,1]`.

mod bicubic;
mod patches;
pub mod ppm;

pub use bicubic::{bicubic_resize, degrade, degrade_to, keys_kernel, source_coordinate, KEYS_A};
pub use patches::{extract_patches, patch_grid_len, PatchPair};

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive, got {height}x{width}"));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(invalid!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x));
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn clamp01(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(invalid!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{} image",
                self.height,
                self.width
            ));
        }
        let mut pixels = Vec::with_capacity(h * w * CHANNELS);
        for y in top..top + h {
            let start = (y * self.width + left) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + w * CHANNELS]);
        }
        Image::new(h, w, pixels)
    }

    /// Planar `[3,H,W]` copy.
    pub fn to_chw<T: Real>(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); plane * CHANNELS];
        for (i, px) in self.pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + i] = T::of(px[c]);
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are clamped to `[0,1]`.
    pub fn from_chw<T: Real>(height: usize, width: usize, chw: &[T]) -> Result<Image> {
        let plane = height * width;
        if chw.len() != plane * CHANNELS {
            return Err(invalid!("planar buffer has {} values, expected {}", chw.len(), plane * CHANNELS));
        }
        let mut pixels = Vec::with_capacity(plane * CHANNELS);
        for i in 0..plane {
            for c in 0..CHANNELS {
                pixels.push(chw[c * plane + i].as_f64().clamp(0.0, 1.0));
            }
        }
        Image::new(height, width, pixels)
    }
}

/// Stacks equally sized images into an `[N,3,H,W]` tensor.
pub fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| invalid!("cannot batch an empty image list"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * CHANNELS);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(invalid!(
                "batch mixes {h}x{w} with {}x{} images",
                img.height,
                img.width
            ));
        }
        data.extend(img.to_chw::<T>());
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}

/// Splits an `[N,3,H,W]` tensor back into images (clamped to `[0,1]`).
pub fn unbatch_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != CHANNELS {
        return Err(invalid!("expected [N,3,H,W], got {s:?}"));
    }
    t.data()
        .chunks(CHANNELS * s[2] * s[3])
        .map(|chw| Image::from_chw(s[2], s[3], chw))
        .collect()
}

/// Mean squared error over every channel value.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(invalid!(
            "psnr: shape mismatch {}x{} vs {}x{}",
            a.height,
            a.width,
            b.height,
            b.width
        ));
    }
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Formats a PSNR value, using the `inf` sentinel for identical images.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}
