//! Learnable convex ×8 upsampling.
//!
//! Every fine pixel is a softmax-weighted mixture of the 3×3 coarse
//! neighborhood around its coarse cell (border neighbors replicated). The
//! logits tensor is `[9·64, h, w]`; channel `k·64 + dy·8 + dx` holds the logit of
//! neighbor `k = ky·3 + kx` for fine offset `(dy, dx)` inside the cell.

use super::flow::WarpFlow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UPSAMPLE_FACTOR: usize = 8;
pub const NEIGHBORS: usize = 9;
pub const SUBPIXELS: usize = UPSAMPLE_FACTOR * UPSAMPLE_FACTOR;
pub const LOGIT_CHANNELS: usize = NEIGHBORS * SUBPIXELS;

/// Mixture logits for one coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleWeights {
    logits: Tensor,
}

impl UpsampleWeights {
    pub fn new(logits: Tensor) -> Result<Self> {
        match logits.shape() {
            [LOGIT_CHANNELS, _, _] => Ok(UpsampleWeights { logits }),
            s => Err(Error::dim(format!(
                "upsample logits must be [{LOGIT_CHANNELS}, h, w], got {s:?}"
            ))),
        }
    }

    /// All-zero logits: every fine pixel averages its 3×3 neighborhood.
    pub fn uniform(h: usize, w: usize) -> Self {
        UpsampleWeights {
            logits: Tensor::zeros([LOGIT_CHANNELS, h, w]),
        }
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.logits.shape()[1], self.logits.shape()[2])
    }

    /// Softmax-normalized mixture weights, same layout as the logits.
    pub fn normalized(&self) -> Vec<f64> {
        let (h, w) = self.grid();
        softmax_mixture(self.logits.data(), h * w)
    }
}

/// Logits that make convex upsampling reproduce bilinear interpolation between
/// coarse cell centers. Returned per channel, in the logit channel layout.
pub fn bilinear_logits() -> Vec<f64> {
    const FLOOR: f64 = 1e-4;
    let f = UPSAMPLE_FACTOR as f64;
    // weights of neighbors at offsets −1, 0, +1 for fine offset d within a cell
    let axis = |d: usize| -> [f64; 3] {
        let o = (d as f64 + 0.5) / f - 0.5;
        [(-o).max(0.0), 1.0 - o.abs(), o.max(0.0)]
    };
    let mut out = vec![0.0; LOGIT_CHANNELS];
    for ky in 0..3 {
        for kx in 0..3 {
            for dy in 0..UPSAMPLE_FACTOR {
                for dx in 0..UPSAMPLE_FACTOR {
                    let w = axis(dy)[ky] * axis(dx)[kx];
                    out[(ky * 3 + kx) * SUBPIXELS + dy * UPSAMPLE_FACTOR + dx] = w.max(FLOOR).ln();
                }
            }
        }
    }
    out
}

#[inline]
fn clamp_offset(i: usize, d: usize, n: usize) -> usize {
    (i + d).saturating_sub(1).min(n - 1)
}

fn softmax_mixture(logits: &[f64], cells: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for s in 0..SUBPIXELS {
        for cell in 0..cells {
            let at = |k: usize| (k * SUBPIXELS + s) * cells + cell;
            let max = (0..NEIGHBORS).map(|k| out[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..NEIGHBORS {
                let e = (out[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..NEIGHBORS {
                out[at(k)] /= sum;
            }
        }
    }
    out
}

fn check(coarse: &Tensor, logits: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match coarse.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("coarse field must be [C, h, w], got {s:?}"))),
    };
    if logits.shape() != [LOGIT_CHANNELS, h, w] {
        return Err(Error::dim(format!(
            "upsample logits {:?} do not match coarse grid {h}×{w}",
            logits.shape()
        )));
    }
    Ok((c, h, w))
}

/// Returns the upsampled field and the normalized weights (kept for backward).
pub(crate) fn upsample_forward(coarse: &Tensor, logits: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = check(coarse, logits)?;
    let cells = h * w;
    let weights = softmax_mixture(logits.data(), cells);
    let (fh, fw) = (h * UPSAMPLE_FACTOR, w * UPSAMPLE_FACTOR);
    let src = coarse.data();
    let mut out = vec![0.0; c * fh * fw];
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            let mut nb = [0usize; NEIGHBORS];
            for ky in 0..3 {
                for kx in 0..3 {
                    nb[ky * 3 + kx] = clamp_offset(i, ky, h) * w + clamp_offset(j, kx, w);
                }
            }
            for dy in 0..UPSAMPLE_FACTOR {
                for dx in 0..UPSAMPLE_FACTOR {
                    let s = dy * UPSAMPLE_FACTOR + dx;
                    let fine = (i * UPSAMPLE_FACTOR + dy) * fw + j * UPSAMPLE_FACTOR + dx;
                    for ch in 0..c {
                        let plane = &src[ch * cells..(ch + 1) * cells];
                        let mut acc = 0.0;
                        for k in 0..NEIGHBORS {
                            acc += weights[(k * SUBPIXELS + s) * cells + cell] * plane[nb[k]];
                        }
                        out[ch * fh * fw + fine] = acc;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, fh, fw], out), weights))
}

pub(crate) fn upsample_backward(
    coarse: &Tensor,
    weights: &[f64],
    grad: &[f64],
    want_coarse: bool,
    want_logits: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (c, h, w) = match coarse.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("validated in forward"),
    };
    let cells = h * w;
    let fw = w * UPSAMPLE_FACTOR;
    let fplane = cells * SUBPIXELS;
    let src = coarse.data();
    let mut gc = want_coarse.then(|| vec![0.0; src.len()]);
    let mut gl = want_logits.then(|| vec![0.0; weights.len()]);
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            let mut nb = [0usize; NEIGHBORS];
            for ky in 0..3 {
                for kx in 0..3 {
                    nb[ky * 3 + kx] = clamp_offset(i, ky, h) * w + clamp_offset(j, kx, w);
                }
            }
            for dy in 0..UPSAMPLE_FACTOR {
                for dx in 0..UPSAMPLE_FACTOR {
                    let s = dy * UPSAMPLE_FACTOR + dx;
                    let fine = (i * UPSAMPLE_FACTOR + dy) * fw + j * UPSAMPLE_FACTOR + dx;
                    let mut dw = [0.0; NEIGHBORS];
                    for ch in 0..c {
                        let g = grad[ch * fplane + fine];
                        for k in 0..NEIGHBORS {
                            let wk = weights[(k * SUBPIXELS + s) * cells + cell];
                            if let Some(gc) = gc.as_mut() {
                                gc[ch * cells + nb[k]] += g * wk;
                            }
                            dw[k] += g * src[ch * cells + nb[k]];
                        }
                    }
                    if let Some(gl) = gl.as_mut() {
                        let mut dot = 0.0;
                        for (k, d) in dw.iter().enumerate() {
                            dot += weights[(k * SUBPIXELS + s) * cells + cell] * d;
                        }
                        for (k, d) in dw.iter().enumerate() {
                            let at = (k * SUBPIXELS + s) * cells + cell;
                            gl[at] = weights[at] * (d - dot);
                        }
                    }
                }
            }
        }
    }
    (gc, gl)
}

/// Upsample a coarse `h×w` flow to `8h×8w`.
pub fn convex_upsample(coarse: &WarpFlow, weights: &UpsampleWeights) -> Result<WarpFlow> {
    if weights.grid() != (coarse.height(), coarse.width()) {
        return Err(Error::dim(format!(
            "upsample weights for {:?} applied to a {}×{} flow",
            weights.grid(),
            coarse.height(),
            coarse.width()
        )));
    }
    let channels = super::flow_to_channels(coarse);
    let (out, _) = upsample_forward(&channels, weights.logits())?;
    super::flow_from_channels(&out)
}
