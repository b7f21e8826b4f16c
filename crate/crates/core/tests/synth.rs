use std::fs;
use std::path::Path;

use booknet::geometry::{bilinear_sample, WarpFlow};
use booknet::synth::*;
use booknet::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn content_is_deterministic_per_seed() {
    let spec = ContentSpec::default();
    let a = gen_content(11, &spec, 64, 96).unwrap();
    let b = gen_content(11, &spec, 64, 96).unwrap();
    let c = gen_content(12, &spec, 64, 96).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_lines_leaves_plain_paper() {
    let spec = ContentSpec {
        lines: 0,
        ..ContentSpec::default()
    };
    let img = gen_content(3, &spec, 40, 60).unwrap();
    let n = 40 * 60;
    for ch in 0..3 {
        let plane = &img.data()[ch * n..(ch + 1) * n];
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
    assert_eq!(ink_coverage(&img), 0.0);
}

#[test]
fn content_rejects_bad_layouts() {
    let wide = ContentSpec {
        margin: 0.5,
        ..ContentSpec::default()
    };
    assert!(matches!(gen_content(0, &wide, 64, 64), Err(Error::Config(_))));
    assert!(gen_content(0, &ContentSpec::default(), 64, 63).is_err());
}

#[test]
fn ink_coverage_stays_in_band_over_a_corpus() {
    // direct pixel count: a pixel is ink when darker than halfway between
    // paper and ink colors
    let spec = ContentSpec::default();
    let mut fractions = Vec::new();
    for seed in 0..40 {
        let img = gen_content(seed, &spec, 288, 288).unwrap();
        let n = 288 * 288;
        let lum: Vec<f64> = (0..n)
            .map(|p| (img.data()[p] + img.data()[n + p] + img.data()[2 * n + p]) / 3.0)
            .collect();
        let hi = lum.iter().cloned().fold(f64::MIN, f64::max);
        let lo = lum.iter().cloned().fold(f64::MAX, f64::min);
        let dark = lum.iter().filter(|&&v| v < 0.5 * (hi + lo)).count();
        fractions.push(dark as f64 / n as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((0.05..=0.20).contains(&mean), "mean ink {mean}");
    assert!(fractions.iter().all(|f| (0.03..=0.25).contains(f)), "{fractions:?}");
}

#[test]
fn collapsed_ranges_give_the_identity() {
    let p = sample_deformation(5, &DeformRanges::identity()).unwrap();
    let content = gen_content(5, &ContentSpec::default(), 32, 48).unwrap();
    let s = render_sample(&content, &p).unwrap();
    assert_eq!(s.distorted, content);
    assert_eq!(s.full.coords(), WarpFlow::identity(32, 48).coords());
    assert!(s.mask.iter().all(|&m| m));
}

#[test]
fn deformation_sampling_is_reproducible() {
    let r = DeformRanges::default();
    assert_eq!(sample_deformation(9, &r).unwrap(), sample_deformation(9, &r).unwrap());
    assert_ne!(sample_deformation(9, &r).unwrap(), sample_deformation(10, &r).unwrap());
}

#[test]
fn folding_ranges_exhaust_the_rejection_budget() {
    let r = DeformRanges {
        curl_amplitude: [1.2, 1.5],
        ..DeformRanges::default()
    };
    assert!(matches!(sample_deformation(1, &r), Err(Error::Range(_))));
    let reversed = DeformRanges {
        scale: [0.9, 0.8],
        ..DeformRanges::default()
    };
    assert!(matches!(sample_deformation(1, &reversed), Err(Error::Config(_))));
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn page_curls_are_uncorrelated() {
    let r = DeformRanges::default();
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for seed in 0..1000 {
        let p = sample_deformation(seed, &r).unwrap();
        left.push(p.curl_left.amplitude);
        right.push(p.curl_right.amplitude);
    }
    let rho = pearson(&left, &right);
    assert!(rho.abs() < 0.1, "r = {rho}");
}

#[test]
fn page_halves_curl_differently() {
    let r = DeformRanges::default();
    for seed in 0..50 {
        let p = sample_deformation(seed, &r).unwrap();
        let mean = |lo: f64| (0..200).map(|i| p.curl_displacement(lo + (i as f64 + 0.5) / 200.0).abs()).sum::<f64>() / 200.0;
        let (l, rr) = (mean(-1.0), mean(0.0));
        assert!((l - rr).abs() > 1e-9, "seed {seed}: {l} vs {rr}");
    }
}

#[test]
fn pure_homography_matches_the_projective_grid() {
    let ranges = DeformRanges {
        scale: [0.8, 0.9],
        rotation: [-0.05, 0.05],
        shift: [-0.04, 0.04],
        perspective: [-0.08, 0.08],
        ..DeformRanges::identity()
    };
    let (h, w) = (40, 56);
    let content = gen_content(2, &ContentSpec::default(), h, w).unwrap();
    for seed in 0..5 {
        let p = sample_deformation(seed, &ranges).unwrap();
        assert!(p.is_homography_only());
        let m = p.homography;
        let s = render_sample(&content, &p).unwrap();
        for r in 0..h {
            for c in 0..w {
                let u = -1.0 + 2.0 * c as f64 / (w - 1) as f64;
                let v = -1.0 + 2.0 * r as f64 / (h - 1) as f64;
                let d = m[6] * u + m[7] * v + m[8];
                let x = (m[0] * u + m[1] * v + m[2]) / d;
                let y = (m[3] * u + m[4] * v + m[5]) / d;
                let (fu, fv) = s.full.get(r, c);
                assert!((fu - x).abs() < 1e-6 && (fv - y).abs() < 1e-6);
            }
        }
    }
}

/// F(G(q)) = q on distorted pixels whose preimage lies on the page.
fn inversion_residual_px(params: &DeformationParams, h: usize, w: usize) -> f64 {
    let content = Tensor::zeros([3, h, w]);
    let s = render_sample(&content, params).unwrap();
    let full = &s.full;
    let f_img = Tensor::new(
        [2, h, w],
        (0..2).flat_map(|k| full.coords().iter().skip(k).step_by(2).cloned().collect::<Vec<_>>()).collect(),
    )
    .unwrap();
    let (g, _) = booknet::geometry::invert_flow(full, &Default::default()).unwrap();
    let composed = bilinear_sample(&f_img, &g).unwrap();
    let mut worst = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let (gu, gv) = g.get(r, c);
            if gu.abs() > 1.0 || gv.abs() > 1.0 {
                continue;
            }
            let u = -1.0 + 2.0 * c as f64 / (w - 1) as f64;
            let v = -1.0 + 2.0 * r as f64 / (h - 1) as f64;
            worst = worst
                .max((composed.data()[r * w + c] - u).abs() * (w - 1) as f64 / 2.0)
                .max((composed.data()[h * w + r * w + c] - v).abs() * (h - 1) as f64 / 2.0);
        }
    }
    worst
}

#[test]
fn sampled_maps_invert_to_sub_tenth_pixel() {
    for seed in 0..8 {
        let p = sample_deformation(seed, &DeformRanges::default()).unwrap();
        let res = inversion_residual_px(&p, 96, 128);
        assert!(res < 0.1, "seed {seed}: {res} px");
    }
}

#[test]
fn samples_round_trip_and_split_exactly() {
    let cfg = GenConfig::default();
    for index in 0..6 {
        let a = generate_sample(21, index, &cfg).unwrap();
        let s = &a.sample;
        assert!(a.round_trip_mssim > 0.9);
        assert!((s.round_trip_mssim().unwrap() - a.round_trip_mssim).abs() < 1e-12);
        let (l, r) = s.full.split_pages().unwrap();
        assert_eq!(l.coords(), s.left.coords());
        assert_eq!(r.coords(), s.right.coords());
        let page = s.mask.iter().filter(|&&m| m).count() as f64 / s.mask.len() as f64;
        assert!(page > 0.4 && page < 1.0, "page fraction {page}");
    }
}

#[test]
fn hsv_zero_width_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::from_fn([3, 9, 7], |_| rng.gen_range(0.0..1.0));
    let out = hsv_jitter(&img, 77, &HsvRanges::none());
    assert!(out.max_abs_diff(&img) < 1e-6);
}

#[test]
fn full_turn_hue_shift_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::from_fn([3, 8, 8], |_| rng.gen_range(0.0..1.0));
    assert!(hsv_adjust(&img, 1.0, 1.0, 1.0).max_abs_diff(&img) < 1e-6);
}

#[test]
fn value_scale_halves_gray() {
    let img = Tensor::from_fn([3, 4, 5], |i| ((i % 20) as f64) / 20.0);
    let out = hsv_adjust(&img, 0.2, 1.7, 0.5);
    for (o, i) in out.data().iter().zip(img.data()) {
        assert!((o - 0.5 * i).abs() < 1e-12);
    }
}

#[test]
fn hsv_ranges_validate() {
    assert!(HsvRanges::default().validate().is_ok());
    let bad = HsvRanges {
        hue: 0.7,
        ..HsvRanges::default()
    };
    assert!(bad.validate().is_err());
    let zero = HsvRanges {
        value: [0.0, 1.0],
        ..HsvRanges::default()
    };
    assert!(zero.validate().is_err());
}

proptest! {
    #[test]
    fn rgb_hsv_round_trip(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (h, s, v) = rgb_to_hsv(r, g, b);
        prop_assert!((0.0..1.0).contains(&h) && (0.0..=1.0).contains(&s));
        let (r2, g2, b2) = hsv_to_rgb(h, s, v);
        prop_assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
    }

    #[test]
    fn jitter_stays_in_unit_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn([3, 5, 5], |_| rng.gen_range(0.0..1.0));
        let out = hsv_jitter(&img, seed, &HsvRanges::default());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn empty_dataset_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(0, 1, &GenConfig::default(), dir.path()).unwrap();
    assert_eq!(m.count, 0);
    assert!(m.entries.is_empty());
    assert_eq!(listing(dir.path()), vec![MANIFEST_FILE.to_string()]);
    assert_eq!(Manifest::load(dir.path().join(MANIFEST_FILE)).unwrap(), m);
}

#[test]
fn regeneration_is_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = GenConfig::default();
    generate_dataset(3, 42, &cfg, a.path()).unwrap();
    generate_dataset(3, 42, &cfg, b.path()).unwrap();
    let names = listing(a.path());
    assert_eq!(names.len(), 3 * 6 + 1);
    assert_eq!(names, listing(b.path()));
    for n in &names {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n}");
    }
}

#[test]
fn written_samples_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(2, 8, &GenConfig::default(), dir.path()).unwrap();
    for e in &m.entries {
        let s = load_sample(dir.path(), e).unwrap();
        let a = generate_sample(8, e.id.parse().unwrap(), &GenConfig::default()).unwrap();
        assert_eq!(a.seed, e.seed);
        // flows are stored as f32, images as 8-bit
        assert!(s.full.max_abs_diff(&a.sample.full) < 1e-6);
        assert!(s.distorted.max_abs_diff(&a.sample.distorted) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(s.mask, a.sample.mask);
    }
}

#[test]
fn failed_generation_removes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    // a directory squatting on the second sample's path makes its write fail
    fs::create_dir(dir.path().join("00001_flat.png")).unwrap();
    assert!(generate_dataset(3, 5, &GenConfig::default(), dir.path()).is_err());
    assert_eq!(listing(dir.path()), vec!["00001_flat.png".to_string()]);
}

#[test]
fn small_spreads_are_rejected() {
    let cfg = GenConfig {
        height: 96,
        width: 96,
        ..GenConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(generate_dataset(1, 0, &cfg, dir.path()), Err(Error::Config(_))));
}
