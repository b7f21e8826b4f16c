use super::Gray;
use crate::error::{Error, Result};

/// Exponents of the five pyramid levels, finest first.
pub const MSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Smallest short side that still fits the window after four halvings.
pub const MSSIM_MIN_SIDE: usize = WINDOW << 4;

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &img[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = g.iter().zip(&src[c..c + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            let src = &rows[(r + k) * ow..(r + k + 1) * ow];
            let dst = &mut out[r * ow..(r + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += gk * s;
            }
        }
    }
    out
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, f64) {
    let g = gaussian_window();
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &g);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &g);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &g);
    let n = mu_a.len() as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l_sum / n, cs_sum / n)
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let i = 2 * r * w + 2 * c;
            out[r * ow + c] = 0.25 * (img[i] + img[i + 1] + img[i + w] + img[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale structural similarity with value range `L = 1`.
///
/// Contrast-structure terms are clamped at zero before exponentiation, so
/// anti-correlated content scores 0 rather than an undefined power.
pub fn mssim(a: &Gray, b: &Gray) -> Result<f64> {
    mssim_weighted(a, b, &MSSIM_WEIGHTS)
}

pub fn mssim_weighted(a: &Gray, b: &Gray, weights: &[f64; 5]) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim(format!(
            "mssim: {}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height.min(a.width) < MSSIM_MIN_SIDE {
        return Err(Error::dim(format!(
            "mssim needs at least {MSSIM_MIN_SIDE} px on the short side, got {}×{}",
            a.height, a.width
        )));
    }
    let (mut x, mut y) = (a.data.clone(), b.data.clone());
    let (mut h, mut w) = (a.height, a.width);
    let mut score = 1.0;
    for (level, wt) in weights.iter().enumerate() {
        let (l, cs) = ssim_terms(&x, &y, h, w, 1.0);
        score *= cs.max(0.0).powf(*wt);
        if level == weights.len() - 1 {
            score *= l.max(0.0).powf(*wt);
        } else {
            let (nx, nh, nw) = downsample(&x, h, w);
            let (ny, _, _) = downsample(&y, h, w);
            x = nx;
            y = ny;
            h = nh;
            w = nw;
        }
    }
    Ok(score)
}

/// MSSIM restricted to `mask`: outside it, both images take the reference's
/// values, so only masked pixels can lower the score.
pub fn masked_mssim(a: &Gray, reference: &Gray, mask: &[bool]) -> Result<f64> {
    if mask.len() != reference.data.len() {
        return Err(Error::dim("mask size differs from image size"));
    }
    let mut a2 = a.clone();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            a2.data[i] = reference.data[i];
        }
    }
    mssim(&a2, reference)
}
