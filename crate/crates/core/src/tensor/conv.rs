//! Stride-1 zero-padded 2-D cross-correlation via im2col + GEMM.

use rayon::prelude::*;

use super::real::{gemm, Real};

/// Output spatial extent of a stride-1 convolution.
pub fn conv_output_dims(h: usize, w: usize, fh: usize, fw: usize, pad: usize) -> Option<(usize, usize)> {
    let oh = (h + 2 * pad).checked_sub(fh)? + 1;
    let ow = (w + 2 * pad).checked_sub(fw)? + 1;
    Some((oh, ow))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub fh: usize,
    pub fw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.fh * self.fw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Unfolds one CHW image into a `(c·fh·fw) × (oh·ow)` column matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.pad as isize;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.fh {
            for j in 0..g.fw {
                let row = (c * g.fh + i) * g.fw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let y = oy as isize + i as isize - pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = ox as isize + j as isize - pad;
                        *v = if xx < 0 || xx >= g.w as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into a CHW image gradient.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.pad as isize;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.fh {
            for j in 0..g.fw {
                let row = (c * g.fh + i) * g.fw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let y = oy as isize + i as isize - pad;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[y as usize * g.w..(y as usize + 1) * g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    // valid ox range: 0 <= ox + j - pad < w
                    let lo = (pad - j as isize).max(0) as usize;
                    let hi = ((g.w as isize + pad - j as isize).min(g.ow as isize)).max(0) as usize;
                    for ox in lo..hi {
                        dst[(ox as isize + j as isize - pad) as usize] += line[ox];
                    }
                }
            }
        }
    }
}

/// Forward pass: `out[n,k] = bias[k] + Σ_c w[k,c] ⋆ x[n,c]`.
pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.k * plane];
    out.par_chunks_mut(g.k * plane)
        .zip(x.par_chunks(g.in_image()))
        .for_each_init(
            || vec![T::zero(); g.patch_len() * plane],
            |cols, (out_n, x_n)| {
                im2col(g, x_n, cols);
                for (k, row) in out_n.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = b[k]);
                }
                gemm(g.k, g.patch_len(), plane, w, false, cols, false, T::one(), out_n);
            },
        );
    out
}

/// Gradients of a convolution. Each output slot is filled only when requested.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.k];
        for dout_n in dout.chunks(g.k * plane) {
            for (k, row) in dout_n.chunks(plane).enumerate() {
                db[k] += row.iter().copied().sum::<T>();
            }
        }
        db
    });

    if !need_dx && !need_dw {
        return ConvGrads { dx: None, dw: None, db };
    }

    // Per-image partials, reduced in index order so the result does not
    // depend on the thread count.
    let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = x
        .par_chunks(g.in_image())
        .zip(dout.par_chunks(g.k * plane))
        .map_init(
            || vec![T::zero(); patch * plane],
            |cols, (x_n, dout_n)| {
                let dw_n = need_dw.then(|| {
                    im2col(g, x_n, cols);
                    let mut dw_n = vec![T::zero(); g.k * patch];
                    gemm(g.k, plane, patch, dout_n, false, cols, true, T::zero(), &mut dw_n);
                    dw_n
                });
                let dx_n = need_dx.then(|| {
                    gemm(patch, g.k, plane, w, true, dout_n, false, T::zero(), cols);
                    let mut dx_n = vec![T::zero(); g.in_image()];
                    col2im(g, cols, &mut dx_n);
                    dx_n
                });
                (dx_n, dw_n)
            },
        )
        .collect();

    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * g.in_image()));
    let mut dw = need_dw.then(|| vec![T::zero(); g.k * patch]);
    for (dx_n, dw_n) in partials {
        if let (Some(dx), Some(dx_n)) = (dx.as_mut(), dx_n) {
            dx.extend_from_slice(&dx_n);
        }
        if let (Some(dw), Some(dw_n)) = (dw.as_mut(), dw_n) {
            for (a, b) in dw.iter_mut().zip(dw_n) {
                *a += b;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Convolution without a graph, for inference helpers and oracles that want
/// the engine path directly. Shapes: x `[n,c,h,w]`, w `[k,c,fh,fw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[T],
    (k, fh, fw): (usize, usize, usize),
    bias: &[T],
    pad: usize,
) -> Vec<T> {
    let (oh, ow) = conv_output_dims(h, w, fh, fw, pad).expect("kernel larger than padded input");
    let g = ConvGeom { n, c, h, w, k, fh, fw, pad, oh, ow };
    forward(&g, x, weight, bias)
}
