//! PNG reading and writing for `[C, H, W]` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load any PNG as 8-bit RGB, returned as `[3, H, W]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Save a `[3, H, W]` tensor as 8-bit RGB PNG (values clamped to `[0, 1]`).
pub fn save_rgb(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("RGB image must be [3, H, W], got {s:?}"))),
    };
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([quantize(d[p]), quantize(d[h * w + p]), quantize(d[2 * h * w + p])])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Save a binary mask as an 8-bit grayscale PNG (0 or 255).
pub fn save_mask(path: impl AsRef<Path>, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let path = path.as_ref();
    if mask.len() != height * width {
        return Err(Error::dim(format!("mask of {} for {height}×{width}", mask.len())));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Load a mask PNG; pixels at or above half intensity are set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.pixels().map(|p| p.0[0] >= 128).collect()))
}

/// Round-trip values through 8-bit storage.
pub fn quantize_8bit(image: &Tensor) -> Tensor {
    image.map(|v| quantize(v) as f64 / 255.0)
}
