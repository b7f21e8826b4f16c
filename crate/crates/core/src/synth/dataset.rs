use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::content::{gen_content, ContentSpec};
use super::deform::{sample_deformation, DeformRanges, DeformationParams};
use super::render::{render_sample, BookSample};
use crate::error::{Error, Result};
use crate::geometry::WarpFlow;
use crate::imageio::{load_mask, load_rgb, save_mask, save_rgb};
use crate::metrics::MSSIM_MIN_SIDE;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything that determines a dataset besides its count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub content: ContentSpec,
    pub deformation: DeformRanges,
    /// Masked round-trip MS-SSIM a sample must exceed to be kept.
    pub min_round_trip: f64,
    /// Draws per sample before generation gives up.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 288,
            width: 288,
            content: ContentSpec::default(),
            deformation: DeformRanges::default(),
            min_round_trip: 0.9,
            max_attempts: 20,
        }
    }
}

impl GenConfig {
    /// The 1200×800 resolution of full-size book photographs.
    pub fn full_resolution() -> Self {
        GenConfig {
            height: 800,
            width: 1200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height.min(self.width) < MSSIM_MIN_SIDE || self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "{}×{} spreads need an even width and sides of at least {MSSIM_MIN_SIDE}",
                self.height, self.width
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        self.content.validate()?;
        self.deformation.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub distorted: String,
    pub flat: String,
    pub mask: String,
    pub flow_full: String,
    pub flow_left: String,
    pub flow_right: String,
}

impl SampleFiles {
    fn for_id(id: &str) -> Self {
        SampleFiles {
            distorted: format!("{id}_distorted.png"),
            flat: format!("{id}_flat.png"),
            mask: format!("{id}_mask.png"),
            flow_full: format!("{id}_full.bkfl"),
            flow_left: format!("{id}_left.bkfl"),
            flow_right: format!("{id}_right.bkfl"),
        }
    }

    fn all(&self) -> [&str; 6] {
        [
            &self.distorted,
            &self.flat,
            &self.mask,
            &self.flow_full,
            &self.flow_left,
            &self.flow_right,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Seed of the accepted draw.
    pub seed: u64,
    pub files: SampleFiles,
    pub params: DeformationParams,
    pub round_trip_mssim: f64,
    /// Draws rejected before this one.
    pub rejected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub ranges: GenConfig,
    pub entries: Vec<ManifestEntry>,
    pub rejected: usize,
}

impl Manifest {
    pub fn rejection_rate(&self) -> f64 {
        let draws = self.count + self.rejected;
        if draws == 0 {
            0.0
        } else {
            self.rejected as f64 / draws as f64
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format("manifest", format!("unsupported version {}", m.version)));
        }
        if m.entries.len() != m.count {
            return Err(Error::format("manifest", "entry count differs from count"));
        }
        Ok(m)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of draw `attempt` for sample `index`: the sample's base seed plus a
/// fixed offset per retry.
pub fn sample_seed(seed: u64, index: usize, attempt: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64)).wrapping_add(attempt as u64 * 0x632B_E59B_D9B4_E019)
}

/// One sample that passed the round-trip gate.
#[derive(Clone, Debug)]
pub struct Accepted {
    pub sample: BookSample,
    pub params: DeformationParams,
    pub seed: u64,
    pub round_trip_mssim: f64,
    pub rejected: usize,
}

/// Draw sample `index` until it renders and passes the round-trip gate.
pub fn generate_sample(seed: u64, index: usize, cfg: &GenConfig) -> Result<Accepted> {
    let mut last = None;
    for attempt in 0..cfg.max_attempts {
        let s = sample_seed(seed, index, attempt);
        let content = gen_content(s, &cfg.content, cfg.height, cfg.width)?;
        let params = sample_deformation(s ^ 0xD1B5_4A32_D192_ED03, &cfg.deformation)?;
        let sample = match render_sample(&content, &params) {
            Ok(sample) => sample,
            Err(e @ Error::Inversion { .. }) => {
                last = Some(e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        let score = sample.round_trip_mssim()?;
        if score > cfg.min_round_trip {
            return Ok(Accepted {
                sample,
                params,
                seed: s,
                round_trip_mssim: score,
                rejected: attempt,
            });
        }
        last = Some(format!("round trip MSSIM {score:.4}"));
    }
    Err(Error::Range(format!(
        "sample {index}: {} draws rejected (last: {})",
        cfg.max_attempts,
        last.unwrap_or_default()
    )))
}

fn write_sample(dir: &Path, files: &SampleFiles, s: &BookSample, written: &mut Vec<PathBuf>) -> Result<()> {
    let mut track = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    save_rgb(track(&files.distorted), &s.distorted)?;
    save_rgb(track(&files.flat), &s.flat)?;
    save_mask(track(&files.mask), s.height(), s.width(), &s.mask)?;
    s.full.save(track(&files.flow_full))?;
    s.left.save(track(&files.flow_left))?;
    s.right.save(track(&files.flow_right))?;
    Ok(())
}

fn write_all(count: usize, seed: u64, cfg: &GenConfig, dir: &Path, written: &mut Vec<PathBuf>) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(count);
    let mut rejected = 0;
    for index in 0..count {
        let a = generate_sample(seed, index, cfg)?;
        let id = format!("{index:05}");
        let files = SampleFiles::for_id(&id);
        write_sample(dir, &files, &a.sample, written)?;
        rejected += a.rejected;
        entries.push(ManifestEntry {
            id,
            seed: a.seed,
            files,
            params: a.params,
            round_trip_mssim: a.round_trip_mssim,
            rejected: a.rejected,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        count,
        seed,
        ranges: cfg.clone(),
        entries,
        rejected,
    };
    let path = dir.join(MANIFEST_FILE);
    written.push(path.clone());
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generate `count` samples into `out_dir` with `manifest.json` listing them.
/// On any failure the files written by this call are removed.
pub fn generate_dataset(count: usize, seed: u64, cfg: &GenConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let result = write_all(count, seed, cfg, dir, &mut written);
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

/// Read back one manifest entry relative to the dataset directory.
pub fn load_sample(dir: impl AsRef<Path>, entry: &ManifestEntry) -> Result<BookSample> {
    let dir = dir.as_ref();
    let files = &entry.files;
    let distorted = load_rgb(dir.join(&files.distorted))?;
    let flat = load_rgb(dir.join(&files.flat))?;
    let (mh, mw, mask) = load_mask(dir.join(&files.mask))?;
    let full = WarpFlow::load(dir.join(&files.flow_full))?;
    let left = WarpFlow::load(dir.join(&files.flow_left))?;
    let right = WarpFlow::load(dir.join(&files.flow_right))?;
    let (h, w) = (full.height(), full.width());
    if distorted.shape() != [3, h, w] || flat.shape() != [3, h, w] || (mh, mw) != (h, w) {
        return Err(Error::dim(format!("sample {} files disagree on extents", entry.id)));
    }
    if left.height() != h || right.height() != h || left.width() + right.width() != w {
        return Err(Error::dim(format!("sample {} page flows do not split the spread", entry.id)));
    }
    Ok(BookSample {
        distorted,
        flat,
        full,
        left,
        right,
        mask,
    })
}

/// Every file a manifest names, for callers that copy or verify datasets.
pub fn manifest_files(m: &Manifest) -> Vec<String> {
    m.entries
        .iter()
        .flat_map(|e| e.files.all().map(str::to_string))
        .collect()
}
