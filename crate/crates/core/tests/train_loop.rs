use booknet::model::{BookNet, BookNetConfig};
use booknet::synth::{gen_content, render_sample, sample_deformation, ContentSpec, DeformRanges, HsvRanges};
use booknet::train::{
    batch_gradients, train_loop, FlowTargets, LogRecord, Supervision, TrainConfig, TrainOutput, TrainSample,
};
use booknet::Error;

fn samples(n: usize, seed: u64) -> Vec<TrainSample> {
    (0..n as u64)
        .map(|i| {
            let content = gen_content(seed + i, &ContentSpec::default(), 64, 64).unwrap();
            let params = sample_deformation(seed + i, &DeformRanges::default()).unwrap();
            let s = render_sample(&content, &params).unwrap();
            TrainSample::new(format!("{i}"), &s, 32, 32).unwrap()
        })
        .collect()
}

fn quick_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps: Some(steps),
        batch_size: 2,
        max_lr: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_reproduces_the_log() {
    let data = samples(3, 10);
    let (net, store) = BookNet::init(BookNetConfig::tiny(), 1).unwrap();
    let cfg = quick_config(4);
    let (pa, la) = train_loop(&net, store.clone(), &cfg, &data, &[], None).unwrap();
    let (pb, lb) = train_loop(&net, store, &cfg, &data, &[], None).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la.to_jsonl(), lb.to_jsonl());
    assert_eq!(pa.to_bytes(), pb.to_bytes());
    let steps: Vec<usize> = la.steps().map(|s| s.step).collect();
    assert_eq!(steps, vec![0, 1, 2, 3]);
    // 3 samples in batches of 2: epochs end after steps 1 and 3
    let ends: Vec<usize> = la.epochs().map(|e| e.step).collect();
    assert_eq!(ends, vec![1, 3]);
    assert!(la.steps().all(|s| s.loss.total.is_finite() && s.lr.is_finite() && s.grad_norm.is_finite()));
}

#[test]
fn full_only_supervision_leaves_page_heads_untouched() {
    let data = samples(1, 20);
    let (net, store) = BookNet::init(BookNetConfig::tiny(), 2).unwrap();
    let batch = [(&data[0].image, &data[0].targets)];
    let (loss, grads) = batch_gradients(
        &net,
        &store,
        &batch,
        Supervision {
            left: false,
            right: false,
            full: true,
        },
    )
    .unwrap();
    assert!(loss.left.is_none() && loss.right.is_none());
    for (id, (name, _)) in store.ids().zip(store.iter()) {
        let g = &grads[id.index()];
        if name.starts_with("head.left") || name.starts_with("head.right") {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    let full_head = store.id_of("head.full.flow.w").unwrap();
    assert!(grads[full_head.index()].iter().any(|&v| v != 0.0));
}

#[test]
fn batch_loss_is_the_mean_of_single_losses() {
    let data = samples(2, 30);
    let (net, store) = BookNet::init(BookNetConfig::tiny(), 3).unwrap();
    let one = |i: usize| {
        batch_gradients(&net, &store, &[(&data[i].image, &data[i].targets)], Supervision::ALL).unwrap()
    };
    let (l0, g0) = one(0);
    let (l1, g1) = one(1);
    let batch: Vec<_> = data.iter().map(|s| (&s.image, &s.targets)).collect();
    let (lb, gb) = batch_gradients(&net, &store, &batch, Supervision::ALL).unwrap();
    assert!((lb.total - 0.5 * (l0.total + l1.total)).abs() < 1e-12);
    for ((a, b), c) in g0.iter().flatten().zip(g1.iter().flatten()).zip(gb.iter().flatten()) {
        assert!((c - 0.5 * (a + b)).abs() <= 1e-12 * (1.0 + c.abs()));
    }
}

#[test]
fn loss_falls_on_a_tiny_problem() {
    let data = samples(2, 40);
    let (net, store) = BookNet::init(BookNetConfig::tiny(), 4).unwrap();
    let cfg = TrainConfig {
        augmentation: HsvRanges::none(),
        ..quick_config(60)
    };
    let (_, log) = train_loop(&net, store, &cfg, &data, &[], None).unwrap();
    let losses = log.losses();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} → {tail}");
}

#[test]
fn output_directory_holds_log_timing_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput {
        dir: dir.path().join("run"),
    };
    let data = samples(2, 50);
    let (net, store) = BookNet::init(BookNetConfig::tiny(), 5).unwrap();
    let (params, log) = train_loop(&net, store, &quick_config(3), &data, &[], Some(&out)).unwrap();
    let text = std::fs::read_to_string(out.log_path()).unwrap();
    assert_eq!(text, log.to_jsonl());
    let parsed: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(matches!(parsed[0], LogRecord::Schedule { .. }));
    assert_eq!(std::fs::read_to_string(out.timing_path()).unwrap().lines().count(), 3);
    for epoch in 0..3 {
        assert!(out.checkpoint_path(epoch).exists());
    }
    let saved = booknet::autodiff::ParamStore::load(out.final_path()).unwrap();
    let mut expect = params.clone();
    expect.quantize_f32();
    assert_eq!(saved.to_bytes(), expect.to_bytes());
}

#[test]
fn non_finite_loss_stops_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput {
        dir: dir.path().to_path_buf(),
    };
    let mut data = samples(1, 60);
    let mut full = data[0].targets.full.clone();
    full.data_mut()[0] = f64::NAN;
    data[0].targets = FlowTargets {
        full,
        ..data[0].targets.clone()
    };
    let (net, store) = BookNet::init(BookNetConfig::tiny(), 6).unwrap();
    let err = train_loop(&net, store.clone(), &quick_config(2), &data, &[], Some(&out)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let saved = booknet::autodiff::ParamStore::load(out.last_good_path()).unwrap();
    let mut expect = store;
    expect.quantize_f32();
    assert_eq!(saved.to_bytes(), expect.to_bytes());
}

#[test]
fn config_errors() {
    let (net, store) = BookNet::init(BookNetConfig::tiny(), 7).unwrap();
    let data = samples(1, 70);
    let bad = TrainConfig {
        batch_size: 0,
        ..quick_config(1)
    };
    assert!(train_loop(&net, store.clone(), &bad, &data, &[], None).is_err());
    assert!(train_loop(&net, store, &quick_config(1), &[], &[], None).is_err());
}
