//! wasm-bindgen surface for the static demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes so the page can put them straight
//! into `ImageData`.

use racnn::data::SyntheticSpec;
use racnn::imageops::{self, Image, CHANNELS};
use wasm_bindgen::prelude::*;

fn to_rgba(img: &Image) -> Vec<u8> {
    img.pixels()
        .chunks(CHANNELS)
        .flat_map(|p| {
            let b = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b(p[0]), b(p[1]), b(p[2]), 255]
        })
        .collect()
}

fn from_rgba(rgba: &[u8], width: usize, height: usize) -> racnn::Result<Image> {
    if rgba.len() != width * height * 4 {
        return Err(racnn::Error::InvalidArgument(format!(
            "{width}x{height} RGBA needs {} bytes, got {}",
            width * height * 4,
            rgba.len()
        )));
    }
    let pixels = rgba
        .chunks(4)
        .flat_map(|p| [p[0], p[1], p[2]].map(|v| v as f64 / 255.0))
        .collect();
    Image::new(height, width, pixels)
}

fn js(e: racnn::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A synthetic image, its degraded copy, and their PSNR.
#[wasm_bindgen]
pub struct Preview {
    side: usize,
    hr: Vec<u8>,
    lr: Vec<u8>,
    psnr: f64,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.side
    }

    #[wasm_bindgen(getter)]
    pub fn hr(&self) -> Vec<u8> {
        self.hr.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn lr(&self) -> Vec<u8> {
        self.lr.clone()
    }

    /// `Infinity` when the degradation left the image unchanged.
    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }
}

pub fn preview(num_classes: usize, class: usize, draw: u32, detail_scale: f64, low_side: usize) -> racnn::Result<Preview> {
    let spec = SyntheticSpec {
        num_classes,
        detail_scale,
        ..SyntheticSpec::default()
    };
    let hr = spec.sample(class, draw as u64)?;
    let lr = imageops::degrade(&hr, low_side, spec.canvas)?;
    Ok(Preview {
        side: spec.canvas,
        psnr: imageops::psnr(&lr, &hr)?,
        hr: to_rgba(&hr),
        lr: to_rgba(&lr),
    })
}

/// Renders draw `draw` of `class` and degrades it through `low_side`².
#[wasm_bindgen(js_name = degradePreview)]
pub fn degrade_preview(
    num_classes: usize,
    class: usize,
    draw: u32,
    detail_scale: f64,
    low_side: usize,
) -> Result<Preview, JsError> {
    preview(num_classes, class, draw, detail_scale, low_side).map_err(js)
}

/// `samples` evenly spaced values of the Keys kernel on `[-2.5, 2.5]`.
#[wasm_bindgen(js_name = keysCurve)]
pub fn keys_curve(samples: usize) -> Vec<f64> {
    let n = samples.max(2);
    (0..n)
        .map(|i| imageops::keys_kernel(-2.5 + 5.0 * i as f64 / (n - 1) as f64))
        .collect()
}

pub fn resize(rgba: &[u8], width: usize, height: usize, out_w: usize, out_h: usize) -> racnn::Result<Vec<u8>> {
    let img = from_rgba(rgba, width, height)?;
    Ok(to_rgba(&imageops::bicubic_resize(&img, out_h, out_w)?))
}

/// Bicubic resize of an RGBA buffer; alpha is dropped and returned opaque.
#[wasm_bindgen(js_name = resizeRgba)]
pub fn resize_rgba(rgba: &[u8], width: usize, height: usize, out_w: usize, out_h: usize) -> Result<Vec<u8>, JsError> {
    resize(rgba, width, height, out_w, out_h).map_err(js)
}
