use std::path::Path;

use image::DynamicImage;

use crate::error::{data_err, Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalization: `(v - 0.5) / 0.5` maps [0, 1] onto [-1, 1].
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.5;

/// Bilinear resize of one row-major plane with half-pixel centers and edge
/// clamping (no antialiasing).
pub fn bilinear_resize(src: &[f32], (sh, sw): (usize, usize), (dh, dw): (usize, usize)) -> Vec<f32> {
    if (sh, sw) == (dh, dw) {
        return src.to_vec();
    }
    let taps = |dst: usize, src_len: usize, dst_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(dh, sh, dh);
    let xs = taps(dw, sw, dw);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn to_tensor(img: DynamicImage, size: usize) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(data_err!("image has zero size"));
    }
    // Grayscale sources are replicated across the three channels here.
    let rgb = img.to_rgb32f();
    let raw = rgb.as_raw();
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane: Vec<f32> = raw.iter().skip(c).step_by(3).copied().collect();
        let resized = bilinear_resize(&plane, (h, w), (size, size));
        data.extend(resized.into_iter().map(|v| (v - NORM_MEAN) / NORM_STD));
    }
    Tensor::new(vec![3, size, size], data)
}

/// Decodes an encoded PNG/BMP image into a normalized 3×size×size tensor.
pub fn preprocess_bytes(bytes: &[u8], size: usize) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes).map_err(|e| data_err!("cannot decode image: {e}"))?;
    to_tensor(img, size)
}

/// Loads an image file into a normalized 3×size×size tensor in [-1, 1].
pub fn preprocess(path: impl AsRef<Path>, size: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    preprocess_bytes(&bytes, size).map_err(|e| data_err!("{}: {e}", path.display()))
}
