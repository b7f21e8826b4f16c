//! Image-quality, geometric and text metrics for rectification results.

mod distortion;
mod mssim;
mod register;
mod report;
mod text;

pub use distortion::{ad, align_similarity, ld, sobel_magnitude, Alignment, Similarity};
pub use mssim::{masked_mssim, mssim, mssim_weighted, MSSIM_MIN_SIDE, MSSIM_WEIGHTS};
pub use register::{compute_correspondence, Correspondence, RegistrationOptions};
pub use report::{evaluate_pair, evaluate_set, format_table, ImageReport, MetricReport, PairEntry, Skipped};
pub use text::{cer, edit_distance};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!("gray image {height}×{width} with {} values", data.len())));
        }
        Ok(Gray { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Gray { height, width, data }
    }

    /// Luminance `0.299 R + 0.587 G + 0.114 B` of a `[3, H, W]` image.
    pub fn from_rgb(image: &Tensor) -> Result<Self> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            [1, h, w] => return Gray::new(*h, *w, image.data().to_vec()),
            s => return Err(Error::dim(format!("expected [3, H, W] image, got {s:?}"))),
        };
        let d = image.data();
        let n = h * w;
        let data = (0..n).map(|p| 0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]).collect();
        Ok(Gray { height: h, width: w, data })
    }
}

/// Recursive pairwise summation, independent of thread count and stable in
/// rounding for long sums.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Pairwise mean; `None` for an empty slice.
pub fn pairwise_mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| pairwise_sum(v) / v.len() as f64)
}
