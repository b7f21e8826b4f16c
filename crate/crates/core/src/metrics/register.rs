//! Dense registration by coarse-to-fine block matching.
//!
//! Each level of a Gaussian pyramid is covered by half-overlapping square
//! blocks. Every block of the rectified image searches a window of integer
//! offsets in the reference around the estimate carried up from the coarser
//! level, scores each offset by normalized cross-correlation, and refines the
//! best one by Gauss-Newton on the intensities. Blocks whose best score falls below the
//! threshold (or that have no texture) are marked invalid.

use serde::{Deserialize, Serialize};

use super::Gray;
use crate::error::{Error, Result};

/// NCC scores closer than this count as a tie.
const NCC_TIE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationOptions {
    pub block: usize,
    /// Search radius in pixels at every level.
    pub search: usize,
    pub levels: usize,
    /// Minimum peak NCC for a block to count as matched.
    pub min_ncc: f64,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        RegistrationOptions {
            block: 16,
            search: 12,
            levels: 4,
            min_ncc: 0.3,
        }
    }
}

/// Per-pixel displacement `d` with `rectified(p) ≈ reference(p + d(p))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub height: usize,
    pub width: usize,
    /// Interleaved `(dx, dy)` in pixels.
    pub disp: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Correspondence {
    pub fn new(height: usize, width: usize, disp: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if disp.len() != 2 * height * width || valid.len() != height * width {
            return Err(Error::dim(format!("correspondence buffers do not match {height}×{width}")));
        }
        Ok(Correspondence {
            height,
            width,
            disp,
            valid,
        })
    }

    /// Same displacement everywhere, all pixels valid.
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Correspondence {
            height,
            width,
            disp: [dx, dy].repeat(height * width),
            valid: vec![true; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> (f64, f64) {
        let i = 2 * (row * self.width + col);
        (self.disp[i], self.disp[i + 1])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// No pixel could be matched (e.g. a constant image).
    pub fn is_degenerate(&self) -> bool {
        self.valid_count() == 0
    }
}

fn blur_decimate(img: &Gray) -> Gray {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = (img.height, img.width);
    let at = |r: isize, c: isize| img.data[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = (0..5).map(|k| K[k] * at(r as isize, c as isize + k as isize - 2)).sum();
        }
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..5)
                .map(|k| {
                    let rr = (2 * r as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                    K[k] * tmp[rr * w + 2 * c]
                })
                .sum();
        }
    }
    Gray {
        height: oh,
        width: ow,
        data: out,
    }
}

/// Block start positions covering `[0, n)` with half-block stride.
fn block_starts(n: usize, block: usize) -> Vec<usize> {
    if n < block {
        return Vec::new();
    }
    let stride = (block / 2).max(1);
    let mut v: Vec<usize> = (0..=n - block).step_by(stride).collect();
    if *v.last().unwrap() != n - block {
        v.push(n - block);
    }
    v
}

/// Block-grid solution at one level.
struct BlockField {
    rows: Vec<f64>,
    cols: Vec<f64>,
    /// Interleaved `(dx, dy)` per block.
    disp: Vec<f64>,
    valid: Vec<bool>,
}

/// Piecewise-linear interpolation weights of `x` on sorted `nodes`.
fn interp_weights(nodes: &[f64], x: f64) -> (usize, usize, f64) {
    if nodes.len() == 1 || x <= nodes[0] {
        return (0, 0, 0.0);
    }
    let last = nodes.len() - 1;
    if x >= nodes[last] {
        return (last, last, 0.0);
    }
    let i = nodes.partition_point(|&n| n <= x) - 1;
    (i, i + 1, (x - nodes[i]) / (nodes[i + 1] - nodes[i]))
}

impl BlockField {
    fn sample(&self, y: f64, x: f64) -> (f64, f64) {
        let (r0, r1, fy) = interp_weights(&self.rows, y);
        let (c0, c1, fx) = interp_weights(&self.cols, x);
        let nc = self.cols.len();
        let d = |r: usize, c: usize, k: usize| self.disp[2 * (r * nc + c) + k];
        let f = |k: usize| {
            (1.0 - fy) * ((1.0 - fx) * d(r0, c0, k) + fx * d(r0, c1, k))
                + fy * ((1.0 - fx) * d(r1, c0, k) + fx * d(r1, c1, k))
        };
        (f(0), f(1))
    }

    fn nearest_valid(&self, y: f64, x: f64) -> bool {
        let near = |nodes: &[f64], v: f64| {
            nodes
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
                .map(|(i, _)| i)
                .unwrap()
        };
        self.valid[near(&self.rows, y) * self.cols.len() + near(&self.cols, x)]
    }

    /// Replace invalid blocks by the mean of valid neighbors, repeatedly.
    fn fill_invalid(&mut self, fallback: &[f64]) {
        let (nr, nc) = (self.rows.len(), self.cols.len());
        let mut known = self.valid.clone();
        if !known.iter().any(|k| *k) {
            self.disp.copy_from_slice(fallback);
            return;
        }
        while known.iter().any(|k| !*k) {
            let snapshot = known.clone();
            for r in 0..nr {
                for c in 0..nc {
                    let i = r * nc + c;
                    if snapshot[i] {
                        continue;
                    }
                    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0);
                    for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr < 0 || cc < 0 || rr >= nr as isize || cc >= nc as isize {
                            continue;
                        }
                        let j = rr as usize * nc + cc as usize;
                        if snapshot[j] {
                            sx += self.disp[2 * j];
                            sy += self.disp[2 * j + 1];
                            n += 1;
                        }
                    }
                    if n > 0 {
                        self.disp[2 * i] = sx / n as f64;
                        self.disp[2 * i + 1] = sy / n as f64;
                        known[i] = true;
                    }
                }
            }
        }
    }
}

/// NCC of the zero-mean block `a` against the reference window at `(r, c)`.
fn ncc_at(a: &[f64], a_norm: f64, b: &Gray, r: usize, c: usize, block: usize) -> f64 {
    let n = (block * block) as f64;
    let (mut sb, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for i in 0..block {
        let row = &b.data[(r + i) * b.width + c..][..block];
        let arow = &a[i * block..(i + 1) * block];
        for (x, y) in arow.iter().zip(row) {
            sb += y;
            sbb += y * y;
            sab += x * y;
        }
    }
    let var_b = sbb - sb * sb / n;
    if var_b <= 1e-12 {
        return -1.0;
    }
    sab / (a_norm * var_b.sqrt())
}

/// NCC restricted to block rows `ri` and columns `rj`, with both sides
/// re-centered on that region.
fn ncc_overlap(
    a: &[f64],
    b: &Gray,
    r: isize,
    c: isize,
    block: usize,
    ri: (usize, usize),
    rj: (usize, usize),
) -> f64 {
    let n = ((ri.1 - ri.0) * (rj.1 - rj.0)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in ri.0..ri.1 {
        let brow = (r + i as isize) as usize * b.width;
        for j in rj.0..rj.1 {
            let x = a[i * block + j];
            let y = b.data[brow + (c + j as isize) as usize];
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 || vb <= 1e-12 {
        return -1.0;
    }
    (sab - sa * sb / n) / (va * vb).sqrt()
}

/// Bilinear lookup with clamped borders.
fn bilinear(img: &Gray, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| img.data[r * img.width + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Gauss-Newton refinement of an integer match on zero-mean intensities.
/// Returns a subpixel correction within half a pixel.
fn refine(a_blk: &[f64], b: &Gray, r0: usize, c0: usize, dy: isize, dx: isize, block: usize) -> (f64, f64) {
    let n = (block * block) as f64;
    let (mut ox, mut oy) = (0.0, 0.0);
    let mut bw = vec![0.0; block * block];
    for _ in 0..3 {
        let (y0, x0) = (r0 as f64 + dy as f64 + oy, c0 as f64 + dx as f64 + ox);
        for i in 0..block {
            for j in 0..block {
                bw[i * block + j] = bilinear(b, y0 + i as f64, x0 + j as f64);
            }
        }
        let mean = bw.iter().sum::<f64>() / n;
        let (mut gxx, mut gxy, mut gyy, mut ex, mut ey) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..block {
            for j in 0..block {
                let (y, x) = (y0 + i as f64, x0 + j as f64);
                let gx = 0.5 * (bilinear(b, y, x + 1.0) - bilinear(b, y, x - 1.0));
                let gy = 0.5 * (bilinear(b, y + 1.0, x) - bilinear(b, y - 1.0, x));
                let e = a_blk[i * block + j] - (bw[i * block + j] - mean);
                gxx += gx * gx;
                gxy += gx * gy;
                gyy += gy * gy;
                ex += gx * e;
                ey += gy * e;
            }
        }
        let det = gxx * gyy - gxy * gxy;
        if det <= 1e-12 * (gxx + gyy).powi(2).max(1e-300) {
            break;
        }
        let sx = (gyy * ex - gxy * ey) / det;
        let sy = (gxx * ey - gxy * ex) / det;
        ox = (ox + sx).clamp(-0.5, 0.5);
        oy = (oy + sy).clamp(-0.5, 0.5);
        if sx.abs().max(sy.abs()) < 1e-4 {
            break;
        }
    }
    (ox, oy)
}

/// Component-wise 3×3 median over valid blocks, leaving invalid ones alone.
fn median_filter(field: &mut BlockField) {
    let (nr, nc) = (field.rows.len(), field.cols.len());
    let src = field.disp.clone();
    for r in 0..nr {
        for c in 0..nc {
            if !field.valid[r * nc + c] {
                continue;
            }
            for k in 0..2 {
                let mut v: Vec<f64> = Vec::with_capacity(9);
                for rr in r.saturating_sub(1)..(r + 2).min(nr) {
                    for cc in c.saturating_sub(1)..(c + 2).min(nc) {
                        if field.valid[rr * nc + cc] {
                            v.push(src[2 * (rr * nc + cc) + k]);
                        }
                    }
                }
                if v.len() >= 3 {
                    v.sort_by(f64::total_cmp);
                    field.disp[2 * (r * nc + c) + k] = v[v.len() / 2];
                }
            }
        }
    }
}

fn match_level(a: &Gray, b: &Gray, prior: Option<&BlockField>, opts: &RegistrationOptions) -> Option<BlockField> {
    let block = opts.block;
    let rs = block_starts(a.height, block);
    let cs = block_starts(a.width, block);
    if rs.is_empty() || cs.is_empty() {
        return None;
    }
    let half = (block as f64 - 1.0) / 2.0;
    let rows: Vec<f64> = rs.iter().map(|&r| r as f64 + half).collect();
    let cols: Vec<f64> = cs.iter().map(|&c| c as f64 + half).collect();
    let radius = opts.search as isize;
    let mut disp = Vec::with_capacity(2 * rs.len() * cs.len());
    let mut valid = Vec::with_capacity(rs.len() * cs.len());
    let mut fallback = Vec::with_capacity(disp.capacity());
    let mut a_blk = vec![0.0; block * block];
    for (bi, &r0) in rs.iter().enumerate() {
        for (bj, &c0) in cs.iter().enumerate() {
            // coarse estimate, scaled to this level
            let (px, py) = prior
                .map(|p| {
                    let (dx, dy) = p.sample(rows[bi] / 2.0, cols[bj] / 2.0);
                    (2.0 * dx, 2.0 * dy)
                })
                .unwrap_or((0.0, 0.0));
            fallback.extend([px, py]);
            for i in 0..block {
                a_blk[i * block..(i + 1) * block].copy_from_slice(&a.data[(r0 + i) * a.width + c0..][..block]);
            }
            let mean = a_blk.iter().sum::<f64>() / a_blk.len() as f64;
            a_blk.iter_mut().for_each(|v| *v -= mean);
            let a_norm = a_blk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if a_norm < 1e-6 {
                disp.extend([px, py]);
                valid.push(false);
                continue;
            }
            let (cx, cy) = (px.round() as isize, py.round() as isize);
            let score = |dy: isize, dx: isize| -> Option<f64> {
                let (r, c) = (r0 as isize + dy, c0 as isize + dx);
                let (bh, bw, bs) = (b.height as isize, b.width as isize, block as isize);
                if r >= 0 && c >= 0 && r + bs <= bh && c + bs <= bw {
                    return Some(ncc_at(&a_blk, a_norm, b, r as usize, c as usize, block));
                }
                // window partly outside the reference: score the overlap
                let (i0, i1) = ((-r).max(0), (bh - r).min(bs));
                let (j0, j1) = ((-c).max(0), (bw - c).min(bs));
                if 2 * (i1 - i0) < bs || 2 * (j1 - j0) < bs {
                    return None;
                }
                Some(ncc_overlap(&a_blk, b, r, c, block, (i0 as usize, i1 as usize), (j0 as usize, j1 as usize)))
            };
            // near-ties (edges parallel to the shift) go to the candidate
            // nearest the prior
            let dist = |dy: isize, dx: isize| (dy - cy).pow(2) + (dx - cx).pow(2);
            let mut best: Option<(f64, isize, isize)> = None;
            for dy in cy - radius..=cy + radius {
                for dx in cx - radius..=cx + radius {
                    if let Some(s) = score(dy, dx) {
                        let better = best.is_none_or(|(bs, by, bx)| {
                            s > bs + NCC_TIE || (s > bs - NCC_TIE && dist(dy, dx) < dist(by, bx))
                        });
                        if better {
                            best = Some((s.max(best.map_or(s, |b| b.0)), dy, dx));
                        }
                    }
                }
            }
            match best {
                Some((s, dy, dx)) if s >= opts.min_ncc => {
                    let (fx, fy) = refine(&a_blk, b, r0, c0, dy, dx, block);
                    disp.extend([dx as f64 + fx, dy as f64 + fy]);
                    valid.push(true);
                }
                _ => {
                    disp.extend([px, py]);
                    valid.push(false);
                }
            }
        }
    }
    let mut field = BlockField {
        rows,
        cols,
        disp,
        valid,
    };
    median_filter(&mut field);
    let valid = field.valid.clone();
    field.fill_invalid(&fallback);
    field.valid = valid;
    Some(field)
}

/// Register `rectified` against `reference` (equal extents).
pub fn compute_correspondence(
    rectified: &Gray,
    reference: &Gray,
    opts: &RegistrationOptions,
) -> Result<Correspondence> {
    if (rectified.height, rectified.width) != (reference.height, reference.width) {
        return Err(Error::dim(format!(
            "registration needs equal extents: {}×{} vs {}×{}",
            rectified.height, rectified.width, reference.height, reference.width
        )));
    }
    if opts.levels == 0 || opts.block < 2 {
        return Err(Error::Config("registration needs ≥ 1 level and blocks of ≥ 2 px".into()));
    }
    let mut pyr_a = vec![rectified.clone()];
    let mut pyr_b = vec![reference.clone()];
    // a level only helps if a block and its search window fit inside it
    let min_side = 2 * (opts.block + opts.search);
    for _ in 1..opts.levels {
        let top = pyr_a.last().unwrap();
        if top.height.min(top.width).div_ceil(2) < min_side {
            break;
        }
        let (na, nb) = (blur_decimate(pyr_a.last().unwrap()), blur_decimate(pyr_b.last().unwrap()));
        pyr_a.push(na);
        pyr_b.push(nb);
    }
    let mut field: Option<BlockField> = None;
    for level in (0..pyr_a.len()).rev() {
        if let Some(f) = match_level(&pyr_a[level], &pyr_b[level], field.as_ref(), opts) {
            field = Some(f);
        }
    }
    let (h, w) = (reference.height, reference.width);
    let mut disp = vec![0.0; 2 * h * w];
    let mut valid = vec![false; h * w];
    if let Some(f) = field {
        for r in 0..h {
            for c in 0..w {
                let (dx, dy) = f.sample(r as f64, c as f64);
                disp[2 * (r * w + c)] = dx;
                disp[2 * (r * w + c) + 1] = dy;
                valid[r * w + c] = f.nearest_valid(r as f64, c as f64);
            }
        }
    }
    Correspondence::new(h, w, disp, valid)
}
