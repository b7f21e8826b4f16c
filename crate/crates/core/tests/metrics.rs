use std::collections::HashMap;

use booknet::imageio::save_rgb;
use booknet::metrics::{
    ad, align_similarity, cer, compute_correspondence, edit_distance, evaluate_set, format_table, ld, mssim,
    mssim_weighted, Correspondence, Gray, RegistrationOptions, MSSIM_WEIGHTS,
};
use booknet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random texture: a few hundred soft blobs over a gentle gradient.
fn texture(h: usize, w: usize, seed: u64) -> Gray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..(h * w) / 60)
        .map(|_| {
            (
                rng.gen_range(-10.0..w as f64 + 10.0),
                rng.gen_range(-10.0..h as f64 + 10.0),
                rng.gen_range(1.5..5.0),
                rng.gen_range(-0.5..0.5),
            )
        })
        .collect();
    let mut data = vec![0.0; h * w];
    for &(bx, by, r, a) in &blobs {
        let reach = (3.0 * r) as isize;
        let (cx, cy) = (bx as isize, by as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                data[y as usize * w + x as usize] += a * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    Gray::from_fn(h, w, |r, c| 0.1 + 0.8 * (data[r * w + c] - lo) / (hi - lo))
}

fn sample_gray(img: &Gray, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| img.data[r * img.width + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn to_rgb(g: &Gray) -> Tensor {
    let mut d = g.data.clone();
    d.extend_from_slice(&g.data);
    d.extend_from_slice(&g.data);
    Tensor::new([3, g.height, g.width], d).unwrap()
}

// ---------------------------------------------------------------- MSSIM

#[test]
fn mssim_weights_are_verbatim() {
    assert_eq!(MSSIM_WEIGHTS, [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]);
    assert!((MSSIM_WEIGHTS.iter().sum::<f64>() - 1.0001).abs() < 1e-12);
}

#[test]
fn mssim_identity_is_exactly_one() {
    for seed in 0..4 {
        let x = texture(180, 200, seed);
        assert_eq!(mssim(&x, &x).unwrap(), 1.0);
    }
    let flat = Gray::from_fn(176, 176, |_, _| 0.3);
    assert_eq!(mssim(&flat, &flat).unwrap(), 1.0);
}

#[test]
fn mssim_is_symmetric() {
    for seed in 0..4 {
        let a = texture(192, 192, seed);
        let b = texture(192, 192, seed + 100);
        let ab = mssim(&a, &b).unwrap();
        let ba = mssim(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-12, "{ab} vs {ba}");
        assert!((0.0..=1.0).contains(&ab));
    }
}

#[test]
fn mssim_of_inverted_half_image_is_low() {
    let x = Gray::from_fn(192, 192, |_, c| if c < 96 { 0.0 } else { 1.0 });
    let inv = Gray::from_fn(192, 192, |r, c| 1.0 - x.data[r * 192 + c]);
    let s = mssim(&x, &inv).unwrap();
    assert!(s < 0.1, "mssim(x, 1-x) = {s}");
}

#[test]
fn mssim_decreases_with_noise() {
    let x = texture(192, 192, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut prev = 1.0;
    for sigma in [0.01, 0.05, 0.2] {
        let noisy = Gray::from_fn(192, 192, |r, c| x.data[r * 192 + c]);
        let noisy = Gray::new(192, 192, noisy.data.iter().map(|v| v + sigma * rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = mssim(&x, &noisy).unwrap();
        assert!(s < prev, "sigma {sigma}: {s} not below {prev}");
        prev = s;
    }
}

#[test]
fn mssim_rejects_small_or_mismatched_images() {
    let a = Gray::from_fn(175, 200, |_, _| 0.5);
    assert!(mssim(&a, &a).is_err());
    let b = Gray::from_fn(176, 176, |_, _| 0.5);
    let c = Gray::from_fn(176, 180, |_, _| 0.5);
    assert!(mssim(&b, &c).is_err());
    assert!(mssim_weighted(&b, &b, &[0.2; 5]).is_ok());
}

// ---------------------------------------------------------------- registration

#[test]
fn identical_images_register_with_zero_displacement() {
    let x = texture(128, 160, 3);
    let c = compute_correspondence(&x, &x, &RegistrationOptions::default()).unwrap();
    assert!(c.valid_count() > c.height * c.width / 2);
    for p in 0..c.height * c.width {
        if c.valid[p] {
            assert!(c.disp[2 * p].abs() < 1e-9 && c.disp[2 * p + 1].abs() < 1e-9);
        }
    }
}

#[test]
fn integer_shift_is_recovered() {
    let big = texture(180, 200, 11);
    let (h, w) = (128, 144);
    let (ox, oy) = (24, 24);
    let reference = Gray::from_fn(h, w, |r, c| big.data[(r + oy) * big.width + c + ox]);
    for (dx, dy) in [(3isize, -2isize), (-7, 5), (10, 0), (0, -11)] {
        // rectified(p) = reference(p + d)
        let rect = Gray::from_fn(h, w, |r, c| {
            big.data[(r as isize + oy as isize + dy) as usize * big.width + (c as isize + ox as isize + dx) as usize]
        });
        let corr = compute_correspondence(&rect, &reference, &RegistrationOptions::default()).unwrap();
        let margin = 16;
        let mut worst = 0.0f64;
        let mut n = 0;
        for r in margin..h - margin {
            for c in margin..w - margin {
                if corr.valid[r * w + c] {
                    let (ex, ey) = corr.get(r, c);
                    worst = worst.max((ex - dx as f64).abs()).max((ey - dy as f64).abs());
                    n += 1;
                }
            }
        }
        assert!(n > (h - 2 * margin) * (w - 2 * margin) / 2, "too few valid pixels: {n}");
        assert!(worst <= 0.5, "shift ({dx}, {dy}): max error {worst}");
    }
}

#[test]
fn smooth_warp_is_recovered_at_ninetieth_percentile() {
    let (h, w) = (160, 192);
    let reference = texture(h, w, 21);
    let truth = |r: usize, c: usize| {
        let (x, y) = (c as f64 / w as f64, r as f64 / h as f64);
        (
            4.0 * (std::f64::consts::PI * y).sin() + 2.0 * x,
            3.0 * (std::f64::consts::PI * 1.5 * x).cos() - 1.5,
        )
    };
    let rect = Gray::from_fn(h, w, |r, c| {
        let (dx, dy) = truth(r, c);
        sample_gray(&reference, c as f64 + dx, r as f64 + dy)
    });
    let corr = compute_correspondence(&rect, &reference, &RegistrationOptions::default()).unwrap();
    let mut errs = Vec::new();
    for r in 8..h - 8 {
        for c in 8..w - 8 {
            if corr.valid[r * w + c] {
                let (ex, ey) = corr.get(r, c);
                let (tx, ty) = truth(r, c);
                errs.push((ex - tx).hypot(ey - ty));
            }
        }
    }
    assert!(errs.len() > (h - 16) * (w - 16) / 2);
    errs.sort_by(f64::total_cmp);
    let p90 = errs[errs.len() * 9 / 10];
    assert!(p90 < 1.0, "90th percentile error {p90}");
}

#[test]
fn constant_images_give_empty_mask() {
    let flat = Gray::from_fn(64, 64, |_, _| 0.4);
    let c = compute_correspondence(&flat, &flat, &RegistrationOptions::default()).unwrap();
    assert!(c.is_degenerate());
    assert!(ld(&c).is_err());
    assert!(ad(&c, &flat).is_err());
}

// ---------------------------------------------------------------- LD / AD

#[test]
fn ld_zero_and_constant_cases() {
    assert_eq!(ld(&Correspondence::constant(10, 12, 0.0, 0.0)).unwrap(), 0.0);
    assert!((ld(&Correspondence::constant(10, 12, 3.0, 4.0)).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn ad_absorbs_similarity_transforms() {
    let img = texture(40, 50, 5);
    assert_eq!(ad(&Correspondence::constant(40, 50, 0.0, 0.0), &img).unwrap().0, 0.0);
    assert!(ad(&Correspondence::constant(40, 50, -2.5, 7.0), &img).unwrap().0 < 1e-9);
    // rotation by 3 degrees, scale 1.05, plus translation
    let (s, th) = (1.05, 3f64.to_radians());
    let (a, b) = (s * th.cos(), s * th.sin());
    let mut disp = Vec::new();
    for r in 0..40 {
        for c in 0..50 {
            let (x, y) = (c as f64, r as f64);
            disp.push(a * x - b * y + 1.5 - x);
            disp.push(b * x + a * y - 0.5 - y);
        }
    }
    let corr = Correspondence::new(40, 50, disp, vec![true; 2000]).unwrap();
    let (v, fallback) = ad(&corr, &img).unwrap();
    assert!(v < 1e-9, "{v}");
    assert!(!fallback);
    let fit = align_similarity(&corr).unwrap().transform;
    assert!((fit.a - a).abs() < 1e-12 && (fit.b - b).abs() < 1e-12);
}

#[test]
fn ad_measures_ripple_on_top_of_similarity() {
    let (h, w) = (64, 96);
    // uniform horizontal gradient
    let img = Gray::from_fn(h, w, |_, c| c as f64 / w as f64);
    let amp = 0.8;
    let tau = std::f64::consts::TAU;
    // products of full-period sines are orthogonal to 1, x and y on the grid
    let ripple = |r: usize, c: usize| {
        let sx = (tau * 3.0 * c as f64 / w as f64).sin();
        let sy = (tau * 2.0 * r as f64 / h as f64).sin();
        let cx = (tau * 5.0 * c as f64 / w as f64).sin();
        let cy = (tau * 1.0 * r as f64 / h as f64).sin();
        (amp * sx * sy, amp * cx * cy)
    };
    let (a, b) = (0.98, 0.04);
    let mut disp = Vec::new();
    let mut mags = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64, r as f64);
            let (rx, ry) = ripple(r, c);
            disp.push(a * x - b * y + 2.0 - x + rx);
            disp.push(b * x + a * y - 1.0 - y + ry);
            mags.push(rx.hypot(ry));
        }
    }
    let expected = mags.iter().sum::<f64>() / mags.len() as f64;
    let corr = Correspondence::new(h, w, disp, vec![true; h * w]).unwrap();
    let (v, _) = ad(&corr, &img).unwrap();
    assert!((v - expected).abs() <= 0.05 * expected, "ad {v}, ripple mean {expected}");
}

#[test]
fn ad_falls_back_to_translation_for_a_single_pixel() {
    let mut valid = vec![false; 100];
    valid[42] = true;
    let corr = Correspondence::new(10, 10, vec![1.0; 200], valid).unwrap();
    let (v, fallback) = ad(&corr, &texture(10, 10, 1)).unwrap();
    assert!(fallback);
    assert_eq!(v, 0.0);
}

proptest! {
    #[test]
    fn alignment_never_increases_residual_energy(
        seed in any::<u64>(),
        h in 3usize..12,
        w in 3usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disp: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let valid: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.8)).collect();
        prop_assume!(valid.iter().any(|&v| v));
        let corr = Correspondence::new(h, w, disp.clone(), valid.clone()).unwrap();
        let al = align_similarity(&corr).unwrap();
        let energy = |v: &[f64]| (0..h * w).filter(|&p| valid[p]).map(|p| v[2 * p].powi(2) + v[2 * p + 1].powi(2)).sum::<f64>();
        prop_assert!(energy(&al.residual) <= energy(&disp) * (1.0 + 1e-12) + 1e-12);
        let img = texture(h, w, seed);
        let (a, _) = ad(&corr, &img).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!(ld(&corr).unwrap() >= 0.0);
    }
}

// ---------------------------------------------------------------- text

/// Top-down recursion over suffixes, memoized; shares nothing with the
/// two-row table.
fn oracle_distance(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let d = if a[0] == b[0] {
        oracle_distance(&a[1..], &b[1..], memo)
    } else {
        1 + oracle_distance(&a[1..], b, memo)
            .min(oracle_distance(a, &b[1..], memo))
            .min(oracle_distance(&a[1..], &b[1..], memo))
    };
    memo.insert((a.len(), b.len()), d);
    d
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: [char; 5] = ['a', 'b', 'c', 'é', ' '];
    let n = rng.gen_range(0..=8);
    (0..n).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

#[test]
fn edit_distance_matches_recursive_oracle_on_ten_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let a = random_string(&mut rng);
        let b = random_string(&mut rng);
        let ac: Vec<char> = a.chars().collect();
        let bc: Vec<char> = b.chars().collect();
        let expected = oracle_distance(&ac, &bc, &mut HashMap::new());
        assert_eq!(edit_distance(&a, &b), expected, "{a:?} vs {b:?}");
    }
}

#[test]
fn kitten_sitting_by_enumeration() {
    // no sequence of two unit edits turns "kitten" into "sitting"
    fn neighbours(s: &str) -> Vec<String> {
        let c: Vec<char> = s.chars().collect();
        let alphabet: Vec<char> = "kitensg".chars().collect();
        let mut out = Vec::new();
        for i in 0..=c.len() {
            for &x in &alphabet {
                let mut v = c.clone();
                v.insert(i, x);
                out.push(v.into_iter().collect());
            }
            if i < c.len() {
                let mut v = c.clone();
                v.remove(i);
                out.push(v.iter().collect());
                for &x in &alphabet {
                    let mut v = c.clone();
                    v[i] = x;
                    out.push(v.into_iter().collect());
                }
            }
        }
        out
    }
    let one = neighbours("kitten");
    assert!(!one.iter().any(|s| s == "sitting"));
    assert!(!one.iter().flat_map(|s| neighbours(s)).any(|s| s == "sitting"));
    assert!(one.iter().flat_map(|s| neighbours(s)).flat_map(|s| neighbours(&s)).any(|s| s == "sitting"));
    assert_eq!(edit_distance("kitten", "sitting"), 3);
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in "[abc]{0,6}", b in "[abc]{0,6}", c in "[abc]{0,6}") {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
    }

    #[test]
    fn cer_is_distance_over_length(a in "\\PC{0,10}", b in "\\PC{1,10}") {
        let expected = edit_distance(&a, &b) as f64 / b.chars().count() as f64;
        prop_assert_eq!(cer(&a, &b).unwrap(), expected);
    }
}

// ---------------------------------------------------------------- report

#[test]
fn evaluate_set_against_itself_and_with_missing_entries() {
    let dir = tempfile::tempdir().unwrap();
    let a = texture(192, 192, 1);
    let b = texture(192, 192, 2);
    save_rgb(dir.path().join("a.png"), &to_rgb(&a)).unwrap();
    save_rgb(dir.path().join("b.png"), &to_rgb(&b)).unwrap();
    std::fs::write(dir.path().join("hyp.txt"), "the quick brwn fox\n").unwrap();
    std::fs::write(dir.path().join("ref.txt"), "the quick brown fox\n").unwrap();
    let manifest = serde_json::json!([
        {"id": "self", "rectified_path": "a.png", "reference_path": "a.png",
         "transcript_hyp": "hyp.txt", "transcript_ref": "ref.txt"},
        {"id": "other", "rectified_path": "b.png", "reference_path": "a.png"},
        {"id": "gone", "rectified_path": "missing.png", "reference_path": "a.png"},
    ]);
    let path = dir.path().join("pairs.json");
    std::fs::write(&path, manifest.to_string()).unwrap();

    let report = evaluate_set(&path, &RegistrationOptions::default()).unwrap();
    assert_eq!(report.images.len(), 2);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].id, "gone");

    let me = &report.images[0];
    assert_eq!(me.id, "self");
    assert_eq!(me.mssim, 1.0);
    assert_eq!(me.ld, Some(0.0));
    assert!(me.ad.unwrap().abs() < 1e-12);
    assert_eq!(me.ed, Some(1));
    assert!((me.cer.unwrap() - 1.0 / 19.0).abs() < 1e-15);

    let other = &report.images[1];
    assert!(other.cer.is_none() && other.ed.is_none());
    let json = serde_json::to_value(other).unwrap();
    assert!(json.get("cer").is_none() && json.get("ed").is_none());

    let agg = &report.aggregate;
    assert_eq!(agg.count, 2);
    assert_eq!(agg.mssim, Some((me.mssim + other.mssim) / 2.0));
    assert_eq!(agg.cer, me.cer);
    assert_eq!(agg.ocr_count, 1);

    let table = format_table(&report);
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["id", "MSSIM", "LD", "AD", "CER", "ED"]);
    assert!(table.contains("skipped gone"));
}

#[test]
fn evaluate_set_rejects_unreadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(evaluate_set(dir.path().join("nope.json"), &RegistrationOptions::default()).is_err());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert!(evaluate_set(&bad, &RegistrationOptions::default()).is_err());
}

