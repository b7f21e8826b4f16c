use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed intervals `[min, max]` for every deformation parameter. Lengths are
/// in normalized spread coordinates (the spread spans `[-1, 1]`, each page one
/// unit) and angles in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformRanges {
    pub curl_amplitude: [f64; 2],
    pub curl_exponent: [f64; 2],
    pub valley_depth: [f64; 2],
    pub valley_width: [f64; 2],
    pub arc: [f64; 2],
    pub scale: [f64; 2],
    pub rotation: [f64; 2],
    pub shift: [f64; 2],
    pub perspective: [f64; 2],
    pub gain_base: [f64; 2],
    pub gain_ramp: [f64; 2],
    pub background: [f64; 2],
}

impl Default for DeformRanges {
    fn default() -> Self {
        DeformRanges {
            curl_amplitude: [0.05, 0.4],
            curl_exponent: [1.5, 4.0],
            valley_depth: [0.0, 0.25],
            valley_width: [0.04, 0.12],
            arc: [-0.06, 0.06],
            scale: [0.8, 0.92],
            rotation: [-0.05, 0.05],
            shift: [-0.04, 0.04],
            perspective: [-0.08, 0.08],
            gain_base: [0.8, 1.0],
            gain_ramp: [-0.12, 0.12],
            background: [0.05, 0.45],
        }
    }
}

impl DeformRanges {
    /// Every range collapsed to the value that leaves the content untouched.
    pub fn identity() -> Self {
        DeformRanges {
            curl_amplitude: [0.0; 2],
            curl_exponent: [2.0; 2],
            valley_depth: [0.0; 2],
            valley_width: [0.1; 2],
            arc: [0.0; 2],
            scale: [1.0; 2],
            rotation: [0.0; 2],
            shift: [0.0; 2],
            perspective: [0.0; 2],
            gain_base: [1.0; 2],
            gain_ramp: [0.0; 2],
            background: [0.2; 2],
        }
    }

    fn named(&self) -> [(&'static str, [f64; 2]); 12] {
        [
            ("curl_amplitude", self.curl_amplitude),
            ("curl_exponent", self.curl_exponent),
            ("valley_depth", self.valley_depth),
            ("valley_width", self.valley_width),
            ("arc", self.arc),
            ("scale", self.scale),
            ("rotation", self.rotation),
            ("shift", self.shift),
            ("perspective", self.perspective),
            ("gain_base", self.gain_base),
            ("gain_ramp", self.gain_ramp),
            ("background", self.background),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.named() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!("range {name} = [{lo}, {hi}] is not an interval")));
            }
        }
        let positive = [
            ("curl_exponent", self.curl_exponent),
            ("scale", self.scale),
            ("gain_base", self.gain_base),
        ];
        for (name, [lo, _]) in positive {
            if lo <= 0.0 {
                return Err(Error::Config(format!("range {name} must be positive")));
            }
        }
        if self.valley_depth[1] > 0.0 && self.valley_width[0] <= 0.0 {
            return Err(Error::Config("valley width must be positive".into()));
        }
        if self.background[0] < 0.0 || self.background[1] > 1.0 {
            return Err(Error::Config("background outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curl {
    pub amplitude: f64,
    pub exponent: f64,
}

impl Curl {
    /// Page-local curl of the distance `s ∈ [0, 1]` from the spine:
    /// `s (1 − a (1 − s)^k)`, which squeezes content toward the spine and
    /// leaves the spine and the outer edge fixed.
    pub fn apply(&self, s: f64) -> f64 {
        s * (1.0 - self.amplitude * (1.0 - s).max(0.0).powf(self.exponent))
    }
}

/// One sampled deformation. The rectified→distorted map is, in order: per-page
/// curl, spine valley, vertical arc, then the homography.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    pub curl_left: Curl,
    pub curl_right: Curl,
    pub valley_depth: f64,
    pub valley_width: f64,
    pub arc: f64,
    /// Row-major 3×3 with the last entry fixed to 1.
    pub homography: [f64; 9],
    pub background: [f64; 3],
    pub gain_base: f64,
    pub gain_ramp: [f64; 2],
    pub seed: u64,
}

fn invert3(m: &[f64; 9]) -> Option<[f64; 9]> {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Some(inv.map(|v| v / det))
}

/// Apply a projective 3×3 to a point; `None` on or behind the horizon.
pub fn apply_homography(m: &[f64; 9], x: f64, y: f64) -> Option<(f64, f64)> {
    let w = m[6] * x + m[7] * y + m[8];
    if w <= 1e-9 {
        return None;
    }
    Some(((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w))
}

pub const IDENTITY_HOMOGRAPHY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl DeformationParams {
    pub fn identity() -> Self {
        DeformationParams {
            curl_left: Curl {
                amplitude: 0.0,
                exponent: 2.0,
            },
            curl_right: Curl {
                amplitude: 0.0,
                exponent: 2.0,
            },
            valley_depth: 0.0,
            valley_width: 0.1,
            arc: 0.0,
            homography: IDENTITY_HOMOGRAPHY,
            background: [0.2; 3],
            gain_base: 1.0,
            gain_ramp: [0.0; 2],
            seed: 0,
        }
    }

    /// Signed horizontal shift the curl applies at spread coordinate `u`.
    pub fn curl_displacement(&self, u: f64) -> f64 {
        let curl = if u < 0.0 { &self.curl_left } else { &self.curl_right };
        u.signum() * curl.apply(u.abs()) - u
    }

    /// The map before the homography.
    fn page_map(&self, u: f64, v: f64) -> (f64, f64) {
        let x = u + self.curl_displacement(u);
        let x = if self.valley_depth > 0.0 {
            let t = x / self.valley_width;
            x * (1.0 - self.valley_depth * (-t * t).exp())
        } else {
            x
        };
        let s = x.abs().min(1.0);
        let y = v + self.arc * 4.0 * s * (1.0 - s);
        (x, y)
    }

    /// Rectified → distorted, in normalized coordinates. Points mapped to the
    /// far side of the homography's horizon come back as NaN.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let (x, y) = self.page_map(u, v);
        apply_homography(&self.homography, x, y).unwrap_or((f64::NAN, f64::NAN))
    }

    pub fn is_homography_only(&self) -> bool {
        self.curl_left.amplitude == 0.0
            && self.curl_right.amplitude == 0.0
            && self.valley_depth == 0.0
            && self.arc == 0.0
    }

    /// Distorted → rectified for pure homographies.
    pub fn homography_inverse(&self) -> Option<[f64; 9]> {
        invert3(&self.homography)
    }

    /// Illumination gain at distorted position `(u, v)`.
    pub fn gain(&self, u: f64, v: f64) -> f64 {
        self.gain_base + self.gain_ramp[0] * u + self.gain_ramp[1] * v
    }

    /// Checks the map on a 65×65 lattice over the spread: finite everywhere,
    /// inside the frame, and orientation-preserving (positive Jacobian
    /// determinant by central differences).
    pub fn check_bijective(&self) -> std::result::Result<(), String> {
        const N: usize = 65;
        const H: f64 = 1e-4;
        for i in 0..N {
            let v = -1.0 + 2.0 * i as f64 / (N - 1) as f64;
            for j in 0..N {
                let u = -1.0 + 2.0 * j as f64 / (N - 1) as f64;
                let (x, y) = self.apply(u, v);
                if !x.is_finite() || !y.is_finite() {
                    return Err(format!("map undefined at ({u}, {v})"));
                }
                if x.abs() > 1.0 + 1e-9 || y.abs() > 1.0 + 1e-9 {
                    return Err(format!("({u}, {v}) maps outside the frame"));
                }
                // one-sided near the spine so the kink is not straddled
                let (ua, ub) = if u == 0.0 { (0.0, H) } else if (u - H).signum() != u.signum() { (u, u + H) } else { (u - H, u) };
                let (xa, ya) = self.apply(ua, v);
                let (xb, yb) = self.apply(ub, v);
                let (xc, yc) = self.apply(u, v - H);
                let (xd, yd) = self.apply(u, v + H);
                let det = (xb - xa) * (yd - yc) - (yb - ya) * (xd - xc);
                if !(det > 0.0) {
                    return Err(format!("map folds at ({u}, {v})"));
                }
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn draw_once(rng: &mut ChaCha8Rng, ranges: &DeformRanges, seed: u64) -> DeformationParams {
    let curl_left = Curl {
        amplitude: draw(rng, ranges.curl_amplitude),
        exponent: draw(rng, ranges.curl_exponent),
    };
    let curl_right = Curl {
        amplitude: draw(rng, ranges.curl_amplitude),
        exponent: draw(rng, ranges.curl_exponent),
    };
    let valley_depth = draw(rng, ranges.valley_depth);
    let valley_width = draw(rng, ranges.valley_width);
    let arc = draw(rng, ranges.arc);
    let scale = draw(rng, ranges.scale);
    let theta = draw(rng, ranges.rotation);
    let (tx, ty) = (draw(rng, ranges.shift), draw(rng, ranges.shift));
    let (px, py) = (draw(rng, ranges.perspective), draw(rng, ranges.perspective));
    let (sin, cos) = theta.sin_cos();
    let homography = [
        scale * cos,
        -scale * sin,
        tx,
        scale * sin,
        scale * cos,
        ty,
        px,
        py,
        1.0,
    ];
    let gray = draw(rng, ranges.background);
    let background = [0usize, 1, 2].map(|_| (gray + rng.gen_range(-0.05..=0.05)).clamp(0.0, 1.0));
    let gain_base = draw(rng, ranges.gain_base);
    let gain_ramp = [draw(rng, ranges.gain_ramp), draw(rng, ranges.gain_ramp)];
    DeformationParams {
        curl_left,
        curl_right,
        valley_depth,
        valley_width,
        arc,
        homography,
        background,
        gain_base,
        gain_ramp,
        seed,
    }
}

pub const MAX_REJECTIONS: usize = 100;

/// Uniform draw within `ranges`, redrawn from the same stream until the map
/// passes [`DeformationParams::check_bijective`].
pub fn sample_deformation(seed: u64, ranges: &DeformRanges) -> Result<DeformationParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::new();
    for _ in 0..MAX_REJECTIONS {
        let p = draw_once(&mut rng, ranges, seed);
        match p.check_bijective() {
            Ok(()) => return Ok(p),
            Err(e) => last = e,
        }
    }
    Err(Error::Range(format!(
        "{MAX_REJECTIONS} consecutive deformations rejected (last: {last})"
    )))
}
