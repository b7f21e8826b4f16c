//! Numeric inversion of a sampled map.
//!
//! Given a map `F` sampled on a regular grid (each pixel holds `F(p)` for the
//! pixel's own normalized position `p`), build `G` on the same grid with
//! `F(G(q)) = q`. `F` is evaluated between samples by bilinear interpolation
//! and extended linearly past the grid border, and each pixel is solved with a
//! damped Newton iteration.

use serde::Serialize;

use super::flow::{normalized_coord, WarpFlow};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct InversionOptions {
    pub iterations: usize,
    /// Residual tolerance in target pixels.
    pub tol_px: f64,
    /// Maximum fraction of pixels allowed to miss the tolerance.
    pub max_failure_fraction: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions {
            iterations: 30,
            tol_px: 0.01,
            max_failure_fraction: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct InversionStats {
    pub max_residual_px: f64,
    pub mean_residual_px: f64,
    pub unconverged: usize,
}

struct PatchEval {
    value: (f64, f64),
    /// Jacobian rows: d(u,v)/dx and d(u,v)/dy in normalized units.
    jac: [[f64; 2]; 2],
}

/// Bilinear evaluation with linear extension beyond the border cells.
fn eval(map: &WarpFlow, x: f64, y: f64) -> PatchEval {
    let (h, w) = (map.height(), map.width());
    let cell = |c: f64, n: usize| -> (usize, usize, f64, f64) {
        if n == 1 {
            return (0, 0, 0.0, 0.0);
        }
        let scale = 0.5 * (n - 1) as f64;
        let px = (c + 1.0) * scale;
        let i0 = (px.floor().max(0.0) as usize).min(n - 2);
        (i0, i0 + 1, px - i0 as f64, scale)
    };
    let (x0, x1, fx, sx) = cell(x, w);
    let (y0, y1, fy, sy) = cell(y, h);
    let p00 = map.get(y0, x0);
    let p01 = map.get(y0, x1);
    let p10 = map.get(y1, x0);
    let p11 = map.get(y1, x1);
    let lerp2 = |a: f64, b: f64, c: f64, d: f64| {
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    };
    let value = (
        lerp2(p00.0, p01.0, p10.0, p11.0),
        lerp2(p00.1, p01.1, p10.1, p11.1),
    );
    let dx = |a: f64, b: f64, c: f64, d: f64| ((1.0 - fy) * (b - a) + fy * (d - c)) * sx;
    let dy = |a: f64, b: f64, c: f64, d: f64| ((1.0 - fx) * (c - a) + fx * (d - b)) * sy;
    PatchEval {
        value,
        jac: [
            [dx(p00.0, p01.0, p10.0, p11.0), dy(p00.0, p01.0, p10.0, p11.0)],
            [dx(p00.1, p01.1, p10.1, p11.1), dy(p00.1, p01.1, p10.1, p11.1)],
        ],
    }
}

/// Invert `map` on its own grid.
pub fn invert_flow(map: &WarpFlow, opts: &InversionOptions) -> Result<(WarpFlow, InversionStats)> {
    let (h, w) = (map.height(), map.width());
    // normalized → pixel scale, per axis
    let px_scale = (0.5 * (w.max(2) - 1) as f64, 0.5 * (h.max(2) - 1) as f64);
    let residual_px = |r: (f64, f64)| ((r.0 * px_scale.0).powi(2) + (r.1 * px_scale.1).powi(2)).sqrt();

    let mut coords = Vec::with_capacity(h * w * 2);
    let mut stats = InversionStats::default();
    let mut sum = 0.0;
    let mut guess: Option<(f64, f64)> = None;
    for r in 0..h {
        let qy = normalized_coord(r, h);
        for c in 0..w {
            let qx = normalized_coord(c, w);
            // start from the neighbor's solution when it is a better fit
            let mut p = (qx, qy);
            if let Some(g) = guess {
                let e0 = eval(map, p.0, p.1).value;
                let e1 = eval(map, g.0, g.1).value;
                if (e1.0 - qx).hypot(e1.1 - qy) < (e0.0 - qx).hypot(e0.1 - qy) {
                    p = g;
                }
            }
            for _ in 0..opts.iterations {
                let e = eval(map, p.0, p.1);
                let res = (e.value.0 - qx, e.value.1 - qy);
                let best = residual_px(res);
                if best < opts.tol_px * 1e-3 {
                    break;
                }
                let [[a, b], [cc, d]] = e.jac;
                let det = a * d - b * cc;
                if det.abs() < 1e-12 {
                    break;
                }
                let step = ((d * res.0 - b * res.1) / det, (-cc * res.0 + a * res.1) / det);
                // backtrack while the residual grows
                let mut t = 1.0;
                loop {
                    let cand = (p.0 - t * step.0, p.1 - t * step.1);
                    let ev = eval(map, cand.0, cand.1).value;
                    let cres = residual_px((ev.0 - qx, ev.1 - qy));
                    if cres < best || t < 1e-4 {
                        p = cand;
                        break;
                    }
                    t *= 0.5;
                }
            }
            let e = eval(map, p.0, p.1).value;
            let res = residual_px((e.0 - qx, e.1 - qy));
            if !res.is_finite() || res > opts.tol_px {
                stats.unconverged += 1;
            }
            stats.max_residual_px = stats.max_residual_px.max(res);
            sum += res;
            guess = Some(p);
            coords.push(p.0);
            coords.push(p.1);
        }
        guess = None;
    }
    stats.mean_residual_px = sum / (h * w) as f64;
    let total = h * w;
    if stats.unconverged as f64 > opts.max_failure_fraction * total as f64 {
        return Err(Error::Inversion {
            unconverged: stats.unconverged,
            total,
        });
    }
    Ok((WarpFlow::new(h, w, coords)?, stats))
}

#[cfg(test)]
mod tests {
    use super::super::{bilinear_sample, flow_from_channels, flow_to_channels};
    use super::*;

    #[test]
    fn identity_inverts_to_identity() {
        let id = WarpFlow::identity(17, 23);
        let (inv, stats) = invert_flow(&id, &InversionOptions::default()).unwrap();
        assert!(inv.max_abs_diff(&id) < 1e-12);
        assert_eq!(stats.unconverged, 0);
    }

    #[test]
    fn translation_inverts_to_opposite_translation() {
        let (tx, ty) = (0.07, -0.031);
        let f = WarpFlow::from_fn(20, 30, |_, _, u, v| (u + tx, v + ty));
        let (inv, _) = invert_flow(&f, &InversionOptions::default()).unwrap();
        let expect = WarpFlow::from_fn(20, 30, |_, _, u, v| (u - tx, v - ty));
        assert!(inv.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn curl_round_trip_is_sub_tenth_pixel() {
        let (h, w) = (64, 96);
        let curl = WarpFlow::from_fn(h, w, |_, _, x, y| {
            let s = x.abs();
            let g = s * (1.0 - 0.4 * (1.0 - s).powi(2));
            (x.signum() * g * 0.9, 0.9 * y + 0.05 * (1.0 - x * x))
        });
        let (inv, stats) = invert_flow(&curl, &InversionOptions::default()).unwrap();
        assert_eq!(stats.unconverged, 0);
        // compose: sample the inverse at the forward map, expect identity
        let composed = flow_from_channels(&bilinear_sample(&flow_to_channels(&inv), &curl).unwrap()).unwrap();
        let id = WarpFlow::identity(h, w);
        let max_px = composed
            .coords()
            .chunks_exact(2)
            .zip(id.coords().chunks_exact(2))
            .map(|(a, b)| {
                (((a[0] - b[0]) * 0.5 * (w - 1) as f64).powi(2)
                    + ((a[1] - b[1]) * 0.5 * (h - 1) as f64).powi(2))
                .sqrt()
            })
            .fold(0.0, f64::max);
        assert!(max_px < 0.1, "round trip error {max_px} px");
    }

    #[test]
    fn folded_map_fails() {
        // u = x², a fold: half the targets have no preimage
        let f = WarpFlow::from_fn(16, 16, |_, _, x, y| (x * x, y));
        assert!(matches!(
            invert_flow(&f, &InversionOptions::default()),
            Err(Error::Inversion { .. })
        ));
    }
}
