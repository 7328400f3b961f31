//! Keys cubic-convolution resampling.
//!
//! Coordinates follow the half-pixel-centre convention: output pixel `i`
//! samples source position `(i + 0.5)·in/out − 0.5`. Taps outside the image
//! are clamped to the border. No anti-aliasing prefilter is applied when
//! shrinking.

use super::{Image, CHANNELS};
use crate::error::{invalid, Result};

/// Keys kernel free parameter.
pub const KEYS_A: f64 = -0.5;

pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

pub fn source_coordinate(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Four clamped taps and their weights for one output coordinate. Index 1 is
/// the reference tap `floor(src)`.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

fn taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|i| {
            let s = source_coordinate(i, in_len, out_len);
            let base = s.floor();
            let t = s - base;
            let base = base as isize;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                idx[k] = (base + k as isize - 1).clamp(0, last) as usize;
                w[k] = keys_kernel(t - (k as f64 - 1.0));
            }
            Taps { idx, w }
        })
        .collect()
}

/// Weighted sum written relative to the reference tap. The kernel weights sum
/// to one, so constant inputs are reproduced exactly.
#[inline]
fn interp(t: &Taps, fetch: impl Fn(usize) -> f64) -> f64 {
    let r = fetch(t.idx[1]);
    let mut acc = 0.0;
    for k in 0..4 {
        acc += t.w[k] * (fetch(t.idx[k]) - r);
    }
    r + acc
}

/// Separable bicubic resize (rows first, then columns), clamped to `[0,1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("bicubic_resize: target must be positive, got {out_h}x{out_w}"));
    }
    let (h, w) = (img.height(), img.width());
    let src = img.pixels();

    let tx = taps(w, out_w);
    let mut rows = vec![0.0; h * out_w * CHANNELS];
    for y in 0..h {
        let line = &src[y * w * CHANNELS..(y + 1) * w * CHANNELS];
        for (x, t) in tx.iter().enumerate() {
            for c in 0..CHANNELS {
                rows[(y * out_w + x) * CHANNELS + c] = interp(t, |i| line[i * CHANNELS + c]);
            }
        }
    }

    let ty = taps(h, out_h);
    let mut out = vec![0.0; out_h * out_w * CHANNELS];
    let stride = out_w * CHANNELS;
    for (y, t) in ty.iter().enumerate() {
        for j in 0..stride {
            out[y * stride + j] = interp(t, |i| rows[i * stride + j]).clamp(0.0, 1.0);
        }
    }
    Image::new(out_h, out_w, out)
}

/// Bicubic down to `low_h×low_w`, then bicubic back up to `out_h×out_w`.
pub fn degrade_to(img: &Image, low_h: usize, low_w: usize, out_h: usize, out_w: usize) -> Result<Image> {
    let low = bicubic_resize(img, low_h, low_w)?;
    bicubic_resize(&low, out_h, out_w)
}

/// Square low-resolution synthesis: down to `low_side²`, up to `out_side²`.
pub fn degrade(img: &Image, low_side: usize, out_side: usize) -> Result<Image> {
    degrade_to(img, low_side, low_side, out_side, out_side)
}
