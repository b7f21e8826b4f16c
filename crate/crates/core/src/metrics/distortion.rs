use serde::Serialize;

use super::register::Correspondence;
use super::Gray;
use crate::error::{Error, Result};

/// Mean displacement magnitude over valid pixels.
pub fn ld(c: &Correspondence) -> Result<f64> {
    let mags: Vec<f64> = (0..c.height * c.width)
        .filter(|&p| c.valid[p])
        .map(|p| c.disp[2 * p].hypot(c.disp[2 * p + 1]))
        .collect();
    if mags.is_empty() {
        return Err(Error::Range("local distortion over an empty validity mask".into()));
    }
    Ok(super::pairwise_sum(&mags) / mags.len() as f64)
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(img: &Gray) -> Vec<f64> {
    let (h, w) = (img.height as isize, img.width as isize);
    let at = |r: isize, c: isize| img.data[(r.clamp(0, h - 1) * w + c.clamp(0, w - 1)) as usize];
    let mut out = Vec::with_capacity(img.data.len());
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Global similarity transform `p ↦ [a −b; b a]·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }
}

/// Residual field after removing the least-squares similarity fit.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub transform: Similarity,
    /// Only a translation could be fitted.
    pub translation_only: bool,
    /// Interleaved residual `(rx, ry)` for every pixel (zero where invalid).
    pub residual: Vec<f64>,
}

/// Fit target positions `p + d(p)` over valid pixels with a similarity.
pub fn align_similarity(c: &Correspondence) -> Result<Alignment> {
    let pts: Vec<(f64, f64, f64, f64)> = (0..c.height)
        .flat_map(|r| (0..c.width).map(move |col| (r, col)))
        .filter(|&(r, col)| c.valid[r * c.width + col])
        .map(|(r, col)| {
            let (dx, dy) = c.get(r, col);
            let (x, y) = (col as f64, r as f64);
            (x, y, x + dx, y + dy)
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::Range("alignment over an empty validity mask".into()));
    }
    let n = pts.len() as f64;
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| pts.iter().map(f).sum::<f64>() / n;
    let (mx, my, mu, mv) = (mean(|p| p.0), mean(|p| p.1), mean(|p| p.2), mean(|p| p.3));
    // centered normal equations: a·S = Σ(x u + y v), b·S = Σ(x v − y u)
    let (mut s, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for &(x, y, u, v) in &pts {
        let (x, y, u, v) = (x - mx, y - my, u - mu, v - mv);
        s += x * x + y * y;
        sa += x * u + y * v;
        sb += x * v - y * u;
    }
    let translation_only = s <= 1e-9 * n;
    let (a, b) = if translation_only { (1.0, 0.0) } else { (sa / s, sb / s) };
    let transform = Similarity {
        a,
        b,
        tx: mu - (a * mx - b * my),
        ty: mv - (b * mx + a * my),
    };
    let mut residual = vec![0.0; 2 * c.height * c.width];
    for r in 0..c.height {
        for col in 0..c.width {
            let p = r * c.width + col;
            if !c.valid[p] {
                continue;
            }
            let (dx, dy) = c.get(r, col);
            let (x, y) = (col as f64, r as f64);
            let (fx, fy) = transform.apply(x, y);
            residual[2 * p] = x + dx - fx;
            residual[2 * p + 1] = y + dy - fy;
        }
    }
    Ok(Alignment {
        transform,
        translation_only,
        residual,
    })
}

/// Aligned distortion in pixels: the residual after similarity alignment,
/// averaged with weights proportional to the reference's Sobel magnitude.
/// Returns the value and whether the fit fell back to translation only.
pub fn ad(c: &Correspondence, reference: &Gray) -> Result<(f64, bool)> {
    if (reference.height, reference.width) != (c.height, c.width) {
        return Err(Error::dim("aligned distortion: reference extents differ"));
    }
    let al = align_similarity(c)?;
    let grad = sobel_magnitude(reference);
    let idx: Vec<usize> = (0..c.height * c.width).filter(|&p| c.valid[p]).collect();
    let wsum = super::pairwise_sum(&idx.iter().map(|&p| grad[p]).collect::<Vec<_>>());
    let terms: Vec<f64> = if wsum > 0.0 {
        idx.iter()
            .map(|&p| grad[p] / wsum * al.residual[2 * p].hypot(al.residual[2 * p + 1]))
            .collect()
    } else {
        // flat reference: fall back to uniform weights
        let n = idx.len() as f64;
        idx.iter()
            .map(|&p| al.residual[2 * p].hypot(al.residual[2 * p + 1]) / n)
            .collect()
    };
    Ok((super::pairwise_sum(&terms), al.translation_only))
}
