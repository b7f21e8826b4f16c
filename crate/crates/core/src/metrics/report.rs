use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ad, cer, compute_correspondence, edit_distance, ld, mssim, pairwise_mean, Gray, RegistrationOptions};
use crate::error::{Error, Result};
use crate::geometry::resize_image;
use crate::imageio::load_rgb;
use crate::tensor::Tensor;

/// One line of a pairs manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub rectified_path: PathBuf,
    pub reference_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_ref: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_hyp: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageReport {
    pub id: String,
    pub mssim: f64,
    /// Absent when registration found no matchable block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ld: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ad: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub mssim: Option<f64>,
    pub ld: Option<f64>,
    pub ad: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed: Option<f64>,
    pub ocr_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageReport>,
    pub aggregate: Aggregate,
    pub skipped: Vec<Skipped>,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageReport>, skipped: Vec<Skipped>) -> Self {
        let col = |f: &dyn Fn(&ImageReport) -> Option<f64>| -> Vec<f64> { images.iter().filter_map(f).collect() };
        let ocr = col(&|r| r.cer);
        let aggregate = Aggregate {
            count: images.len(),
            mssim: pairwise_mean(&col(&|r| Some(r.mssim))),
            ld: pairwise_mean(&col(&|r| r.ld)),
            ad: pairwise_mean(&col(&|r| r.ad)),
            cer: pairwise_mean(&ocr),
            ed: pairwise_mean(&col(&|r| r.ed.map(|e| e as f64))),
            ocr_count: ocr.len(),
        };
        MetricReport {
            images,
            aggregate,
            skipped,
        }
    }
}

/// Metrics for one rectified image against its reference. The rectified
/// image is resized to the reference's extents first.
pub fn evaluate_pair(
    id: &str,
    rectified: &Tensor,
    reference: &Tensor,
    transcripts: Option<(&str, &str)>,
    opts: &RegistrationOptions,
) -> Result<ImageReport> {
    let (h, w) = match reference.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("reference must be [C, H, W], got {s:?}"))),
    };
    let rect = resize_image(rectified, h, w)?;
    let a = Gray::from_rgb(&rect)?;
    let b = Gray::from_rgb(reference)?;
    let mut flags = Vec::new();
    let score = mssim(&a, &b)?;
    let corr = compute_correspondence(&a, &b, opts)?;
    let (ld_v, ad_v) = if corr.is_degenerate() {
        flags.push("no valid correspondence".to_string());
        (None, None)
    } else {
        let (ad_v, fallback) = ad(&corr, &b)?;
        if fallback {
            flags.push("translation-only alignment".to_string());
        }
        (Some(ld(&corr)?), Some(ad_v))
    };
    let (cer_v, ed_v) = match transcripts {
        Some((hyp, reference)) => (Some(cer(hyp, reference)?), Some(edit_distance(hyp, reference))),
        None => (None, None),
    };
    Ok(ImageReport {
        id: id.to_string(),
        mssim: score,
        ld: ld_v,
        ad: ad_v,
        cer: cer_v,
        ed: ed_v,
        flags,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Evaluate every entry of a pairs manifest in manifest order. Entries whose
/// files cannot be read or evaluated are skipped and listed.
pub fn evaluate_set(manifest: impl AsRef<Path>, opts: &RegistrationOptions) -> Result<MetricReport> {
    let manifest = manifest.as_ref();
    let text = read_text(manifest)?;
    let entries: Vec<PairEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest.to_path_buf(),
        source,
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for e in &entries {
        let result = (|| -> Result<ImageReport> {
            let rect = load_rgb(base.join(&e.rectified_path))?;
            let reference = load_rgb(base.join(&e.reference_path))?;
            let transcripts = match (&e.transcript_hyp, &e.transcript_ref) {
                (Some(h), Some(r)) => Some((read_text(&base.join(h))?, read_text(&base.join(r))?)),
                _ => None,
            };
            evaluate_pair(
                &e.id,
                &rect,
                &reference,
                transcripts.as_ref().map(|(h, r)| (h.trim_end(), r.trim_end())),
                opts,
            )
        })();
        match result {
            Ok(r) => images.push(r),
            Err(err) => skipped.push(Skipped {
                id: e.id.clone(),
                reason: err.to_string(),
            }),
        }
    }
    Ok(MetricReport::from_images(images, skipped))
}

/// Plain-text table with columns `MSSIM LD AD CER ED`, one row per image plus
/// the mean.
pub fn format_table(report: &MetricReport) -> String {
    let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    let id_w = report.images.iter().map(|r| r.id.len()).chain([4]).max().unwrap();
    let mut out = format!(
        "{:<id_w$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "id", "MSSIM", "LD", "AD", "CER", "ED"
    );
    let mut row = |id: &str, m: Option<f64>, l: Option<f64>, a: Option<f64>, c: Option<f64>, e: String| {
        out.push_str(&format!(
            "{id:<id_w$}  {:>8}  {:>8}  {:>8}  {:>8}  {e:>8}\n",
            f(m, 4),
            f(l, 3),
            f(a, 3),
            f(c, 4)
        ));
    };
    for r in &report.images {
        let ed = r.ed.map_or("-".to_string(), |e| e.to_string());
        row(&r.id, Some(r.mssim), r.ld, r.ad, r.cer, ed);
    }
    let a = &report.aggregate;
    row("mean", a.mssim, a.ld, a.ad, a.cer, f(a.ed, 2));
    for s in &report.skipped {
        out.push_str(&format!("skipped {}: {}\n", s.id, s.reason));
    }
    out
}
