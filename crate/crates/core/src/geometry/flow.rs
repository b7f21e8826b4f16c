use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FLOW_MAGIC: &[u8; 4] = b"BKFL";
const FLOW_VERSION: u32 = 1;

/// Dense backward-sampling field.
///
/// Pixel `(row, col)` holds the normalized source coordinate `(u, v)` it reads
/// from; `-1` is the center of the first source pixel and `+1` the center of the
/// last, independently per axis. Because coordinates are normalized, a flow
/// can be applied to a source image of any extent.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpFlow {
    height: usize,
    width: usize,
    /// Row-major `(u, v)` pairs.
    coords: Vec<f64>,
}

/// Normalized coordinate of pixel center `index` along an axis of `extent` pixels.
pub fn normalized_coord(index: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * index as f64 / (extent - 1) as f64
    }
}

/// Pixel position of normalized coordinate `c` along an axis of `extent` pixels.
pub fn pixel_coord(c: f64, extent: usize) -> f64 {
    (c + 1.0) * 0.5 * (extent.max(1) - 1) as f64
}

impl WarpFlow {
    pub fn new(height: usize, width: usize, coords: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("flow extents {height}×{width}")));
        }
        if coords.len() != height * width * 2 {
            return Err(Error::dim(format!(
                "flow {height}×{width} needs {} values, got {}",
                height * width * 2,
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("flow coordinates".into()));
        }
        Ok(WarpFlow {
            height,
            width,
            coords,
        })
    }

    /// The regular grid: every pixel samples its own center.
    pub fn identity(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _, u, v| (u, v))
    }

    /// Build from `f(row, col, u_identity, v_identity) -> (u, v)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, f64, f64) -> (f64, f64),
    ) -> Self {
        assert!(height > 0 && width > 0, "flow extents must be positive");
        let mut coords = Vec::with_capacity(height * width * 2);
        for r in 0..height {
            let v = normalized_coord(r, height);
            for c in 0..width {
                let (a, b) = f(r, c, normalized_coord(c, width), v);
                coords.push(a);
                coords.push(b);
            }
        }
        WarpFlow {
            height,
            width,
            coords,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn get(&self, row: usize, col: usize) -> (f64, f64) {
        let i = 2 * (row * self.width + col);
        (self.coords[i], self.coords[i + 1])
    }

    /// Fraction of pixels sampling outside `[-1, 1]` on either axis.
    pub fn out_of_range_fraction(&self) -> f64 {
        let n = self
            .coords
            .chunks_exact(2)
            .filter(|p| p[0].abs() > 1.0 || p[1].abs() > 1.0)
            .count();
        n as f64 / (self.height * self.width) as f64
    }

    /// Per-pixel in-range mask (`true` where both coordinates lie in `[-1, 1]`).
    pub fn in_range_mask(&self) -> Vec<bool> {
        self.coords
            .chunks_exact(2)
            .map(|p| p[0].abs() <= 1.0 && p[1].abs() <= 1.0)
            .collect()
    }

    /// `[H, W, 2]` tensor sharing the same memory layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width, 2], self.coords.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 2] => Self::new(*h, *w, t.data().to_vec()),
            s => Err(Error::dim(format!("flow tensor must be [H, W, 2], got {s:?}"))),
        }
    }

    /// Column halves `(left, right)`.
    pub fn split_pages(&self) -> Result<(WarpFlow, WarpFlow)> {
        if self.width % 2 != 0 {
            return Err(Error::dim(format!("cannot split odd width {}", self.width)));
        }
        let half = self.width / 2;
        let mut left = Vec::with_capacity(self.coords.len() / 2);
        let mut right = Vec::with_capacity(self.coords.len() / 2);
        for row in self.coords.chunks_exact(self.width * 2) {
            left.extend_from_slice(&row[..half * 2]);
            right.extend_from_slice(&row[half * 2..]);
        }
        Ok((
            WarpFlow {
                height: self.height,
                width: half,
                coords: left,
            },
            WarpFlow {
                height: self.height,
                width: half,
                coords: right,
            },
        ))
    }

    /// Inverse of [`split_pages`](Self::split_pages).
    pub fn stitch_pages(left: &WarpFlow, right: &WarpFlow) -> Result<WarpFlow> {
        if left.height != right.height || left.width != right.width {
            return Err(Error::dim(format!(
                "page flows differ: {}×{} vs {}×{}",
                left.height, left.width, right.height, right.width
            )));
        }
        let mut coords = Vec::with_capacity(left.coords.len() * 2);
        for (l, r) in left
            .coords
            .chunks_exact(left.width * 2)
            .zip(right.coords.chunks_exact(right.width * 2))
        {
            coords.extend_from_slice(l);
            coords.extend_from_slice(r);
        }
        Ok(WarpFlow {
            height: left.height,
            width: left.width * 2,
            coords,
        })
    }

    pub fn max_abs_diff(&self, other: &WarpFlow) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&FLOW_VERSION.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.coords.len() * 4);
        for &c in &self.coords {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::format("BKFL", reason);
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[..4] != FLOW_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != FLOW_VERSION {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        let mut raw = vec![0u8; h * w * 2 * 4];
        r.read_exact(&mut raw).map_err(|_| bad("truncated payload"))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|_| bad("read error"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        let coords = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        WarpFlow::new(h, w, coords)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to a Vec cannot fail");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}
