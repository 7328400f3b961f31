use super::{degrade_to, Image};
use crate::error::{invalid, Result};

/// Co-located low-resolution (already upscaled) and ground-truth patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: Image,
    pub hr: Image,
}

/// Number of positions of a sliding window along one axis.
pub fn patch_grid_len(extent: usize, patch: usize, stride: usize) -> usize {
    if patch > extent || stride == 0 {
        0
    } else {
        (extent - patch) / stride + 1
    }
}

/// Slides a `patch×patch` window over `img_hr` and pairs every HR patch with
/// the co-located patch of the degraded image. The whole image is degraded
/// (down to `low_side²`, back up to its own size) before cutting patches.
pub fn extract_patches(img_hr: &Image, patch: usize, stride: usize, low_side: usize) -> Result<Vec<PatchPair>> {
    let (h, w) = (img_hr.height(), img_hr.width());
    if patch == 0 || patch > h.min(w) {
        return Err(invalid!("patch size {patch} does not fit a {h}x{w} image"));
    }
    if stride == 0 {
        return Err(invalid!("patch stride must be at least 1"));
    }
    let lr_full = degrade_to(img_hr, low_side, low_side, h, w)?;
    let mut out = Vec::with_capacity(patch_grid_len(h, patch, stride) * patch_grid_len(w, patch, stride));
    for top in (0..=h - patch).step_by(stride) {
        for left in (0..=w - patch).step_by(stride) {
            out.push(PatchPair {
                lr: lr_full.crop(top, left, patch, patch)?,
                hr: img_hr.crop(top, left, patch, patch)?,
            });
        }
    }
    Ok(out)
}
