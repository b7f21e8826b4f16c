//! Synthetic distorted book spreads with exact ground-truth flows.
//!
//! Each sample starts from procedural flat content. A parametric map from
//! rectified to distorted coordinates (per-page curl, spine valley, vertical
//! arc, camera homography) is the supervision target; the distorted image is
//! rendered through its inverse, so the flows are exact by construction.

mod content;
mod dataset;
mod deform;
mod hsv;
mod render;

pub use content::{gen_content, ink_coverage, ContentSpec};
pub use dataset::{
    generate_dataset, generate_sample, load_sample, manifest_files, sample_seed, Accepted, GenConfig, Manifest,
    ManifestEntry, SampleFiles, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use deform::{
    apply_homography, sample_deformation, Curl, DeformRanges, DeformationParams, IDENTITY_HOMOGRAPHY, MAX_REJECTIONS,
};
pub use hsv::{hsv_adjust, hsv_jitter, hsv_to_rgb, rgb_to_hsv, HsvRanges};
pub use render::{render_sample, render_sample_with, BookSample};
