//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use racnn::imageops::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

/// Cubic convolution kernel with a = -1/2, written out from its piecewise
/// polynomial form.
pub fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct 2-D evaluation: every output pixel sums the 4×4 neighbourhood
/// with product weights, border-clamped, half-pixel centres.
pub fn bicubic_2d(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Image::from_fn(out_h, out_w, |oy, ox| {
        let cy = (oy as f64 + 0.5) * sy - 0.5;
        let cx = (ox as f64 + 0.5) * sx - 0.5;
        let (fy, fx) = (cy.floor() as isize, cx.floor() as isize);
        let mut acc = [0.0; 3];
        for iy in fy - 1..=fy + 2 {
            for ix in fx - 1..=fx + 2 {
                let wgt = keys(cy - iy as f64) * keys(cx - ix as f64);
                let py = iy.clamp(0, h as isize - 1) as usize;
                let px = ix.clamp(0, w as isize - 1) as usize;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wgt * img.get(py, px, c);
                }
            }
        }
        acc.map(|v| v.clamp(0.0, 1.0))
    })
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

/// Brute-force average per-class accuracy: tally hits and totals per class
/// with plain counters, average over classes that occur.
pub fn tally_accuracy(preds: &[usize], labels: &[usize], l: usize) -> f64 {
    let mut hit = vec![0u64; l];
    let mut tot = vec![0u64; l];
    for i in 0..labels.len() {
        tot[labels[i]] += 1;
        if preds[i] == labels[i] {
            hit[labels[i]] += 1;
        }
    }
    let present: Vec<usize> = (0..l).filter(|&k| tot[k] > 0).collect();
    present.iter().map(|&k| hit[k] as f64 / tot[k] as f64).sum::<f64>() / present.len() as f64
}
