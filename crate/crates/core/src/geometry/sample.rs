//! Bilinear backward warping with border clamping.

use super::flow::WarpFlow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel positions within this distance of an integer are treated as exact
/// hits, so identity grids reproduce their source bit for bit.
const SNAP: f64 = 1e-9;

/// Interpolation cell along one axis.
#[derive(Clone, Copy, Debug)]
struct Cell {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel position)/d(normalized coordinate); zero where clamped.
    slope: f64,
}

fn locate(c: f64, extent: usize) -> Cell {
    if extent == 1 {
        return Cell {
            i0: 0,
            i1: 0,
            frac: 0.0,
            slope: 0.0,
        };
    }
    let last = (extent - 1) as f64;
    let scale = 0.5 * last;
    let mut x = (c + 1.0) * scale;
    let r = x.round();
    if (x - r).abs() < SNAP {
        x = r;
    }
    if x < 0.0 {
        Cell {
            i0: 0,
            i1: 1,
            frac: 0.0,
            slope: 0.0,
        }
    } else if x > last {
        Cell {
            i0: extent - 2,
            i1: extent - 1,
            frac: 1.0,
            slope: 0.0,
        }
    } else {
        let i0 = (x.floor() as usize).min(extent - 2);
        Cell {
            i0,
            i1: i0 + 1,
            frac: x - i0 as f64,
            slope: scale,
        }
    }
}

fn check(src: &Tensor, flow: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, hs, ws) = match src.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("sample source must be [C, H, W], got {s:?}"))),
    };
    let (h, w) = match flow.shape() {
        [h, w, 2] => (*h, *w),
        s => return Err(Error::dim(format!("sample flow must be [H, W, 2], got {s:?}"))),
    };
    if c == 0 || hs == 0 || ws == 0 {
        return Err(Error::dim(format!("empty sample source {:?}", src.shape())));
    }
    Ok((c, hs, ws, h, w))
}

pub(crate) fn sample_forward(src: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (c, hs, ws, h, w) = check(src, flow)?;
    if flow.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling flow".into()));
    }
    let s = src.data();
    let f = flow.data();
    let plane = hs * ws;
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        let cx = locate(f[2 * p], ws);
        let cy = locate(f[2 * p + 1], hs);
        let (w00, w01) = ((1.0 - cy.frac) * (1.0 - cx.frac), (1.0 - cy.frac) * cx.frac);
        let (w10, w11) = (cy.frac * (1.0 - cx.frac), cy.frac * cx.frac);
        let (r0, r1) = (cy.i0 * ws, cy.i1 * ws);
        for ch in 0..c {
            let b = ch * plane;
            out[ch * h * w + p] = w00 * s[b + r0 + cx.i0]
                + w01 * s[b + r0 + cx.i1]
                + w10 * s[b + r1 + cx.i0]
                + w11 * s[b + r1 + cx.i1];
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

pub(crate) fn sample_backward(
    src: &Tensor,
    flow: &Tensor,
    grad: &[f64],
    want_src: bool,
    want_flow: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (c, hs, ws, h, w) = check(src, flow).expect("validated in forward");
    let s = src.data();
    let f = flow.data();
    let plane = hs * ws;
    let mut gs = want_src.then(|| vec![0.0; s.len()]);
    let mut gf = want_flow.then(|| vec![0.0; f.len()]);
    for p in 0..h * w {
        let cx = locate(f[2 * p], ws);
        let cy = locate(f[2 * p + 1], hs);
        let (r0, r1) = (cy.i0 * ws, cy.i1 * ws);
        let mut du = 0.0;
        let mut dv = 0.0;
        for ch in 0..c {
            let g = grad[ch * h * w + p];
            let b = ch * plane;
            if let Some(gs) = gs.as_mut() {
                gs[b + r0 + cx.i0] += g * (1.0 - cy.frac) * (1.0 - cx.frac);
                gs[b + r0 + cx.i1] += g * (1.0 - cy.frac) * cx.frac;
                gs[b + r1 + cx.i0] += g * cy.frac * (1.0 - cx.frac);
                gs[b + r1 + cx.i1] += g * cy.frac * cx.frac;
            }
            if gf.is_some() {
                let (s00, s01) = (s[b + r0 + cx.i0], s[b + r0 + cx.i1]);
                let (s10, s11) = (s[b + r1 + cx.i0], s[b + r1 + cx.i1]);
                du += g * ((1.0 - cy.frac) * (s01 - s00) + cy.frac * (s11 - s10));
                dv += g * ((1.0 - cx.frac) * (s10 - s00) + cx.frac * (s11 - s01));
            }
        }
        if let Some(gf) = gf.as_mut() {
            gf[2 * p] = du * cx.slope;
            gf[2 * p + 1] = dv * cy.slope;
        }
    }
    (gs, gf)
}

/// Rectify `source[C×Hs×Ws]` with `flow`, producing `C × flow.height × flow.width`.
pub fn bilinear_sample(source: &Tensor, flow: &WarpFlow) -> Result<Tensor> {
    sample_forward(source, &flow.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, h, w], |i| (i % w) as f64)
    }

    #[test]
    fn identity_flow_is_exact() {
        let src = Tensor::from_fn([3, 7, 11], |i| ((i * 37) % 17) as f64 / 17.0);
        let out = bilinear_sample(&src, &WarpFlow::identity(7, 11)).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn constant_flow_reads_one_pixel() {
        let src = Tensor::from_fn([2, 5, 6], |i| i as f64 * 0.5);
        let (p, q) = (3usize, 2usize); // column 3, row 2
        let u = super::super::flow::normalized_coord(p, 6);
        let v = super::super::flow::normalized_coord(q, 5);
        let flow = WarpFlow::from_fn(4, 4, |_, _, _, _| (u, v));
        let out = bilinear_sample(&src, &flow).unwrap();
        for ch in 0..2 {
            let expect = src.data()[ch * 30 + q * 6 + p];
            assert!(out.data()[ch * 16..(ch + 1) * 16].iter().all(|&x| x == expect));
        }
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        let w = 9;
        let src = ramp(4, w);
        let flow = WarpFlow::from_fn(4, w, |_, c, _, v| {
            (super::super::flow::normalized_coord(c, w) + 1.0 / (w - 1) as f64, v)
        });
        let out = bilinear_sample(&src, &flow).unwrap();
        for r in 0..4 {
            for c in 0..w - 1 {
                // scalar interpolation oracle on I(x) = x
                let x = c as f64 + 0.5;
                let (x0, t) = (x.floor(), x - x.floor());
                let oracle = x0 * (1.0 - t) + (x0 + 1.0) * t;
                assert!((out.data()[r * w + c] - oracle).abs() < 1e-12);
            }
            // the last column clamps to the border
            assert_eq!(out.data()[r * w + w - 1], (w - 1) as f64);
        }
    }

    #[test]
    fn zero_sized_source_is_rejected() {
        assert!(Tensor::new([1, 0, 3], vec![]).is_err());
        let flat = Tensor::zeros([4, 4]);
        assert!(sample_forward(&flat, &WarpFlow::identity(2, 2).to_tensor()).is_err());
    }

    #[test]
    fn clamped_samples_have_no_flow_gradient() {
        let src = ramp(3, 3);
        let flow = WarpFlow::new(1, 1, vec![1.7, 0.0]).unwrap();
        let out = bilinear_sample(&src, &flow).unwrap();
        assert_eq!(out.data()[0], 2.0);
        let (_, gf) = sample_backward(&src, &flow.to_tensor(), &[1.0], false, true);
        assert_eq!(gf.unwrap(), vec![0.0, 0.0]);
    }
}
