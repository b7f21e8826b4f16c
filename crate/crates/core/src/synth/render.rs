use super::deform::{apply_homography, DeformationParams};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, invert_flow, normalized_coord, InversionOptions, WarpFlow};
use crate::metrics::{masked_mssim, Gray};
use crate::tensor::Tensor;

/// A rendered spread with its exact supervision.
#[derive(Clone, Debug)]
pub struct BookSample {
    /// `[3, H, W]` distorted photograph.
    pub distorted: Tensor,
    /// `[3, H, W]` flat content.
    pub flat: Tensor,
    /// Rectified→distorted map over the spread.
    pub full: WarpFlow,
    pub left: WarpFlow,
    pub right: WarpFlow,
    /// Page pixels of the distorted image.
    pub mask: Vec<bool>,
}

impl BookSample {
    pub fn height(&self) -> usize {
        self.full.height()
    }

    pub fn width(&self) -> usize {
        self.full.width()
    }

    /// Rectified pixels whose source lies inside the distorted image.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.full.in_range_mask()
    }

    /// Masked MS-SSIM between `bilinear_sample(distorted, full)` and the flat
    /// content.
    pub fn round_trip_mssim(&self) -> Result<f64> {
        let rect = bilinear_sample(&self.distorted, &self.full)?;
        masked_mssim(&Gray::from_rgb(&rect)?, &Gray::from_rgb(&self.flat)?, &self.valid_mask())
    }
}

/// Render `content` through the deformation. The distorted image samples the
/// content at the inverse map (closed form for pure homographies), blends to
/// the background over one pixel at the page edge and applies the gain ramp.
pub fn render_sample(content: &Tensor, params: &DeformationParams) -> Result<BookSample> {
    render_sample_with(content, params, &InversionOptions::default())
}

pub fn render_sample_with(content: &Tensor, params: &DeformationParams, opts: &InversionOptions) -> Result<BookSample> {
    let (h, w) = match content.shape() {
        [3, h, w] if *h > 0 && *w > 0 && w % 2 == 0 => (*h, *w),
        s => return Err(Error::dim(format!("content must be [3, H, even W], got {s:?}"))),
    };
    let full = WarpFlow::from_fn(h, w, |_, _, u, v| params.apply(u, v));
    if full.coords().iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("deformation map".into()));
    }
    let inverse = match (params.is_homography_only(), params.homography_inverse()) {
        (true, Some(inv)) => {
            // beyond the horizon: any point well outside the page
            WarpFlow::from_fn(h, w, |_, _, u, v| apply_homography(&inv, u, v).unwrap_or((4.0, 4.0)))
        }
        _ => invert_flow(&full, opts)?.0,
    };
    let (sx, sy) = (0.5 * (w - 1) as f64, 0.5 * (h - 1) as f64);
    let n = h * w;
    let mut distorted = bilinear_sample(content, &inverse)?;
    let out = distorted.data_mut();
    let mut mask = vec![false; n];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let (gu, gv) = inverse.get(r, c);
            let outside = ((gu.abs() - 1.0) * sx).max((gv.abs() - 1.0) * sy);
            let alpha = (1.0 - outside).clamp(0.0, 1.0);
            mask[p] = alpha >= 0.5;
            let gain = params.gain(normalized_coord(c, w), normalized_coord(r, h));
            for ch in 0..3 {
                let lit = (out[ch * n + p] * gain).clamp(0.0, 1.0);
                out[ch * n + p] = alpha * lit + (1.0 - alpha) * params.background[ch];
            }
        }
    }
    let (left, right) = full.split_pages()?;
    Ok(BookSample {
        distorted,
        flat: content.clone(),
        full,
        left,
        right,
        mask,
    })
}
