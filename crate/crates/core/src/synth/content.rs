use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layout of the procedural two-page content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentSpec {
    /// Page margin as a fraction of the page's width and height.
    pub margin: f64,
    /// Text lines per page; 0 leaves the pages blank.
    pub lines: usize,
    /// Height of a line's ink as a fraction of the line pitch.
    pub ink_height: f64,
    /// Chance that a page carries one figure block.
    pub figure_probability: f64,
    pub page_numbers: bool,
}

impl Default for ContentSpec {
    fn default() -> Self {
        ContentSpec {
            margin: 0.1,
            lines: 18,
            ink_height: 0.32,
            figure_probability: 0.35,
            page_numbers: true,
        }
    }
}

impl ContentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} leaves no page area", self.margin)));
        }
        if !(self.ink_height > 0.0 && self.ink_height <= 1.0) {
            return Err(Error::Config(format!("ink height {} outside (0, 1]", self.ink_height)));
        }
        if !(0.0..=1.0).contains(&self.figure_probability) {
            return Err(Error::Config("figure probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ink coverage accumulated with area-weighted anti-aliasing.
struct Canvas {
    width: usize,
    height: usize,
    ink: Vec<f64>,
}

impl Canvas {
    /// Axis-aligned rectangle in continuous pixel coordinates (pixel `c`
    /// spans `[c, c + 1)`), composited with opacity `alpha`.
    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, alpha: f64) {
        let (x0, x1) = (x0.max(0.0), x1.min(self.width as f64));
        let (y0, y1) = (y0.max(0.0), y1.min(self.height as f64));
        if x1 <= x0 || y1 <= y0 {
            return;
        }
        for r in y0.floor() as usize..(y1.ceil() as usize).min(self.height) {
            let cy = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
            for c in x0.floor() as usize..(x1.ceil() as usize).min(self.width) {
                let cx = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
                let a = alpha * cx * cy;
                let p = &mut self.ink[r * self.width + c];
                *p = 1.0 - (1.0 - *p) * (1.0 - a);
            }
        }
    }
}

/// Page box in pixels: `(left, top, right, bottom)`.
type PageBox = (f64, f64, f64, f64);

fn text_line(canvas: &mut Canvas, rng: &mut ChaCha8Rng, x0: f64, x1: f64, y: f64, height: f64, fill: f64) {
    let width = x1 - x0;
    let end = x0 + fill * width;
    let mut x = x0;
    while x < end {
        let word = width * rng.gen_range(0.03..0.11);
        let stop = (x + word).min(end);
        canvas.rect(x, y, stop, y + height, 1.0);
        x = stop + width * rng.gen_range(0.012..0.02);
    }
}

fn figure(canvas: &mut Canvas, rng: &mut ChaCha8Rng, b: PageBox) {
    let (x0, y0, x1, y1) = b;
    let line = ((x1 - x0).min(y1 - y0) * 0.02).max(0.8);
    canvas.rect(x0, y0, x1, y0 + line, 0.9);
    canvas.rect(x0, y1 - line, x1, y1, 0.9);
    canvas.rect(x0, y0, x0 + line, y1, 0.9);
    canvas.rect(x1 - line, y0, x1, y1, 0.9);
    // a bar chart: bars of random heights on a light fill
    canvas.rect(x0 + line, y0 + line, x1 - line, y1 - line, 0.08);
    let bars = rng.gen_range(3..7);
    let slot = (x1 - x0 - 2.0 * line) / bars as f64;
    for i in 0..bars {
        let h = (y1 - y0 - 2.0 * line) * rng.gen_range(0.2..0.9);
        let bx = x0 + line + i as f64 * slot;
        canvas.rect(bx + 0.2 * slot, y1 - line - h, bx + 0.8 * slot, y1 - line, rng.gen_range(0.35..0.8));
    }
}

fn page(canvas: &mut Canvas, rng: &mut ChaCha8Rng, spec: &ContentSpec, b: PageBox, number: usize) {
    if spec.lines == 0 {
        return;
    }
    let (px0, py0, px1, py1) = b;
    let (pw, ph) = (px1 - px0, py1 - py0);
    let (x0, x1) = (px0 + spec.margin * pw, px1 - spec.margin * pw);
    let (y0, y1) = (py0 + spec.margin * ph, py1 - spec.margin * ph);
    let pitch = (y1 - y0) / spec.lines as f64;
    let height = spec.ink_height * pitch;
    let fig = if rng.gen_bool(spec.figure_probability) && spec.lines >= 6 {
        let span = rng.gen_range(3..=(spec.lines / 2).min(6));
        let start = rng.gen_range(0..=spec.lines - span);
        Some((start, span))
    } else {
        None
    };
    let mut i = 0;
    while i < spec.lines {
        if let Some((start, span)) = fig {
            if i == start {
                let top = y0 + i as f64 * pitch + 0.3 * pitch;
                let bottom = y0 + (i + span) as f64 * pitch - 0.3 * pitch;
                let inset = (x1 - x0) * rng.gen_range(0.05..0.25);
                figure(canvas, rng, (x0 + inset, top, x1 - inset, bottom));
                i += span;
                continue;
            }
        }
        let y = y0 + i as f64 * pitch + 0.5 * (pitch - height);
        let last_of_paragraph = rng.gen_bool(0.15);
        let fill = if last_of_paragraph { rng.gen_range(0.25..0.75) } else { 1.0 };
        text_line(canvas, rng, x0, x1, y, height, fill);
        if last_of_paragraph && i + 1 < spec.lines && rng.gen_bool(0.5) {
            i += 1;
        }
        i += 1;
    }
    if spec.page_numbers {
        let digits = if number < 10 { 1 } else if number < 100 { 2 } else { 3 };
        let dw = 0.6 * height;
        let cx = 0.5 * (px0 + px1);
        let y = py1 - 0.5 * spec.margin * ph - 0.5 * height;
        for d in 0..digits {
            let x = cx - 0.5 * digits as f64 * dw * 1.3 + d as f64 * dw * 1.3;
            canvas.rect(x, y, x + dw, y + height, 1.0);
        }
    }
}

/// Procedural two-page spread `[3, height, width]`: paper-colored pages with
/// text-line bars, an occasional figure and page numbers. The left page
/// occupies columns `[0, width/2)`.
pub fn gen_content(seed: u64, spec: &ContentSpec, height: usize, width: usize) -> Result<Tensor> {
    spec.validate()?;
    if height == 0 || width < 2 || width % 2 != 0 {
        return Err(Error::Config(format!("spread {height}×{width} needs positive height and even width")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paper: [f64; 3] = {
        let base = rng.gen_range(0.88..0.97);
        [base, base - rng.gen_range(0.0..0.02), base - rng.gen_range(0.01..0.06)]
    };
    let ink_color: [f64; 3] = {
        let k = rng.gen_range(0.05..0.2);
        [k, k, k + rng.gen_range(0.0..0.05)]
    };
    let mut canvas = Canvas {
        width,
        height,
        ink: vec![0.0; height * width],
    };
    let half = (width / 2) as f64;
    let number = rng.gen_range(2..400) & !1;
    page(&mut canvas, &mut rng, spec, (0.0, 0.0, half, height as f64), number);
    page(&mut canvas, &mut rng, spec, (half, 0.0, 2.0 * half, height as f64), number + 1);
    let n = height * width;
    let mut data = vec![0.0; 3 * n];
    for ch in 0..3 {
        for p in 0..n {
            let a = canvas.ink[p];
            data[ch * n + p] = paper[ch] * (1.0 - a) + ink_color[ch] * a;
        }
    }
    Tensor::new([3, height, width], data)
}

/// Fraction of the spread covered by ink, measured as the mean darkening
/// relative to the brightest (paper) value.
pub fn ink_coverage(content: &Tensor) -> f64 {
    let d = content.data();
    let n = content.numel() / 3;
    let lum: Vec<f64> = (0..n).map(|p| (d[p] + d[n + p] + d[2 * n + p]) / 3.0).collect();
    let paper = lum.iter().cloned().fold(f64::MIN, f64::max);
    let ink = lum.iter().cloned().fold(f64::MAX, f64::min);
    if paper - ink < 1e-9 {
        return 0.0;
    }
    lum.iter().map(|v| (paper - v) / (paper - ink)).sum::<f64>() / n as f64
}
