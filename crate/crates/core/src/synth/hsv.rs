use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Jitter bounds: hue shift in turns, saturation and value as
/// multiplicative factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsvRanges {
    pub hue: f64,
    pub saturation: [f64; 2],
    pub value: [f64; 2],
}

impl Default for HsvRanges {
    fn default() -> Self {
        HsvRanges {
            hue: 0.05,
            saturation: [0.7, 1.3],
            value: [0.7, 1.2],
        }
    }
}

impl HsvRanges {
    pub fn none() -> Self {
        HsvRanges {
            hue: 0.0,
            saturation: [1.0; 2],
            value: [1.0; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("hue jitter {} outside [0, 0.5] turn", self.hue)));
        }
        for (name, [lo, hi]) in [("saturation", self.saturation), ("value", self.value)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} jitter [{lo}, {hi}] must be a positive interval")));
            }
        }
        Ok(())
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Shift hue by `hue` turns and scale saturation and value, clamping the
/// result to `[0, 1]`.
pub fn hsv_adjust(image: &Tensor, hue: f64, saturation: f64, value: f64) -> Tensor {
    let n = image.numel() / 3;
    let d = image.data();
    let mut adjusted = image.clone();
    let out = adjusted.data_mut();
    for p in 0..n {
        let (h, s, v) = rgb_to_hsv(d[p], d[n + p], d[2 * n + p]);
        let (r, g, b) = hsv_to_rgb(h + hue, (s * saturation).clamp(0.0, 1.0), v * value);
        out[p] = r.clamp(0.0, 1.0);
        out[n + p] = g.clamp(0.0, 1.0);
        out[2 * n + p] = b.clamp(0.0, 1.0);
    }
    adjusted
}

/// Random [`hsv_adjust`] with factors drawn uniformly from `ranges`.
pub fn hsv_jitter(image: &Tensor, seed: u64, ranges: &HsvRanges) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let hue = draw(-ranges.hue, ranges.hue);
    let sat = draw(ranges.saturation[0], ranges.saturation[1]);
    let val = draw(ranges.value[0], ranges.value[1]);
    hsv_adjust(image, hue, sat, val)
}
