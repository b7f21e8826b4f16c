//! Warping flows and the differentiable operations over them.

pub mod flow;
pub mod invert;
pub mod sample;
pub mod upsample;

pub use flow::{normalized_coord, pixel_coord, WarpFlow};
pub use invert::{invert_flow, InversionOptions, InversionStats};
pub use sample::bilinear_sample;
pub use upsample::{bilinear_logits, convex_upsample, UpsampleWeights, LOGIT_CHANNELS, UPSAMPLE_FACTOR};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[2, H, W]` channel-first view of a flow (u plane, then v plane).
pub fn flow_to_channels(flow: &WarpFlow) -> Tensor {
    let n = flow.height() * flow.width();
    let mut data = vec![0.0; 2 * n];
    for (p, uv) in flow.coords().chunks_exact(2).enumerate() {
        data[p] = uv[0];
        data[n + p] = uv[1];
    }
    Tensor::from_parts(vec![2, flow.height(), flow.width()], data)
}

pub fn flow_from_channels(t: &Tensor) -> Result<WarpFlow> {
    let (h, w) = match t.shape() {
        [2, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("flow channels must be [2, H, W], got {s:?}"))),
    };
    let n = h * w;
    let d = t.data();
    let mut coords = Vec::with_capacity(2 * n);
    for p in 0..n {
        coords.push(d[p]);
        coords.push(d[n + p]);
    }
    WarpFlow::new(h, w, coords)
}

/// Bilinear resize of both coordinate channels. Normalized coordinates keep
/// their meaning, so no magnitude rescaling is involved.
pub fn resize_flow(flow: &WarpFlow, height: usize, width: usize) -> Result<WarpFlow> {
    if height == 0 || width == 0 {
        return Err(Error::dim(format!("resize target {height}×{width}")));
    }
    if (height, width) == (flow.height(), flow.width()) {
        return Ok(flow.clone());
    }
    let channels = flow_to_channels(flow);
    let out = bilinear_sample(&channels, &WarpFlow::identity(height, width))?;
    flow_from_channels(&out)
}

/// Bilinear resize of a `[C, H, W]` image, sampling at the same normalized
/// positions as [`resize_flow`]. When shrinking by more than 2× the source is
/// first box-filtered so fine detail does not alias.
pub fn resize_image(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("image must be [C, H, W], got {s:?}"))),
    };
    if height == 0 || width == 0 {
        return Err(Error::dim(format!("resize target {height}×{width}")));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let fy = (h / height).max(1);
    let fx = (w / width).max(1);
    let src = if fy > 1 || fx > 1 {
        box_downsample(image, c, h, w, fy, fx)
    } else {
        image.clone()
    };
    bilinear_sample(&src, &WarpFlow::identity(height, width))
}

fn box_downsample(image: &Tensor, c: usize, h: usize, w: usize, fy: usize, fx: usize) -> Tensor {
    let (oh, ow) = (h / fy, w / fx);
    let d = image.data();
    let norm = 1.0 / (fy * fx) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut acc = 0.0;
                for dy in 0..fy {
                    let row = &d[ch * h * w + (r * fy + dy) * w + col * fx..][..fx];
                    acc += row.iter().sum::<f64>();
                }
                out[(ch * oh + r) * ow + col] = acc * norm;
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}
