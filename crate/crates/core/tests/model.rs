use booknet::autodiff::{ParamStore, Tape};
use booknet::model::{grid_to_tokens, param_count, BookNet, BookNetConfig};
use booknet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(cfg: &BookNetConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([3, cfg.height, cfg.width], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0))
}

fn zero_residual_projections(net: &BookNet, store: &mut ParamStore) {
    for l in net.layout().residual_projections() {
        store.get_mut(l.w).data_mut().fill(0.0);
        store.get_mut(l.b).data_mut().fill(0.0);
    }
}

#[test]
fn toy_shape_contract() {
    let cfg = BookNetConfig::toy();
    let (net, store) = BookNet::init(cfg.clone(), 1).unwrap();
    let pred = net.predict(&store, &image(&cfg, 2)).unwrap();
    assert_eq!((pred.left.height(), pred.left.width()), (96, 48));
    assert_eq!((pred.right.height(), pred.right.width()), (96, 48));
    assert_eq!((pred.full.height(), pred.full.width()), (96, 96));
}

#[test]
fn backbone_reaches_one_eighth_resolution() {
    let cfg = BookNetConfig::toy();
    let (net, store) = BookNet::init(cfg.clone(), 1).unwrap();
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let f = net.backbone_forward(&mut t, &p, &image(&cfg, 0)).unwrap();
    assert_eq!(t.shape(f), [64, 12, 12]);
}

#[test]
fn non_square_inputs_follow_the_contract() {
    let mut cfg = BookNetConfig::tiny();
    cfg.height = 48;
    cfg.width = 64;
    let (net, store) = BookNet::init(cfg.clone(), 3).unwrap();
    let pred = net.predict(&store, &image(&cfg, 4)).unwrap();
    assert_eq!((pred.left.height(), pred.left.width()), (48, 32));
    assert_eq!((pred.full.height(), pred.full.width()), (48, 64));
}

#[test]
fn wrong_image_extent_is_rejected() {
    let cfg = BookNetConfig::tiny();
    let (net, store) = BookNet::init(cfg, 0).unwrap();
    assert!(net.predict(&store, &Tensor::zeros([3, 16, 32])).is_err());
}

#[test]
fn initial_prediction_is_near_identity() {
    let cfg = BookNetConfig::toy();
    let (net, store) = BookNet::init(cfg.clone(), 5).unwrap();
    let pred = net.predict(&store, &image(&cfg, 6)).unwrap();
    let id = booknet::geometry::WarpFlow::identity(96, 96);
    // within one pixel (2/95 in normalized units)
    assert!(pred.full.max_abs_diff(&id) < 2.0 / 95.0);
}

#[test]
fn param_count_matches_store() {
    for cfg in [BookNetConfig::tiny(), BookNetConfig::toy(), BookNetConfig::paper()] {
        let (_, store) = BookNet::init(cfg.clone(), 0).unwrap();
        assert_eq!(param_count(&cfg), store.num_scalars(), "{cfg:?}");
    }
}

#[test]
fn param_count_hand_sum_for_tiny() {
    // tiny: 32×32, C=8, backbone 4→6→8 with one block per stage, one encoder
    // layer, 1 + 1 decoder layers per branch, FFN ×2, 4×4 features, 4×2 queries
    let stem = 4 * 3 * 49 + 4;
    let stage1 = (6 * 4 * 9 + 6) + (6 * 6 * 9 + 6) + (6 * 4 + 6);
    let stage2 = (8 * 6 * 9 + 8) + (8 * 8 * 9 + 8) + (8 * 6 + 8);
    let attn = 4 * (64 + 8);
    let ffn = 8 * 16 + 16 + 16 * 8 + 8;
    let enc = 16 * 8 + (2 * 16 + attn + ffn);
    let dec = 2 * 8 * 8 + 4 * (4 * 16 + 2 * attn + ffn);
    let exchange = 2 * (attn + 16);
    let fusion = 2 * (8 * 8 * 9 + 8);
    let heads = 3 * ((2 * 8 * 9 + 2) + (576 * 8 + 576));
    let total = stem + stage1 + stage2 + enc + dec + exchange + fusion + heads;
    assert_eq!(param_count(&BookNetConfig::tiny()), total);
}

#[test]
fn param_count_scaling_and_empty_decoder() {
    let base = BookNetConfig::toy();
    let mut no_dec = base.clone();
    no_dec.decoder_layers = [0, 0];
    let c = base.channels;
    let e = base.ffn_expansion;
    let layer = 4 * 2 * c + 2 * 4 * (c * c + c) + (2 * c * c * e + c * e + c);
    assert_eq!(param_count(&base) - param_count(&no_dec), 4 * layer);
    let (_, store) = BookNet::init(no_dec.clone(), 0).unwrap();
    assert_eq!(store.num_scalars(), param_count(&no_dec));
    assert!(store
        .iter()
        .all(|(n, _)| !n.starts_with("decoder.") || n.ends_with(".queries")));

    // attention projections: 4(C² + C) per block, so doubling C gives 4(4C² + 2C)
    let per_layer = |cfg: &BookNetConfig| {
        let mut a = cfg.clone();
        a.encoder_layers = 1;
        let mut b = cfg.clone();
        b.encoder_layers = 0;
        param_count(&a) - param_count(&b)
    };
    let mut wide = base.clone();
    wide.channels = 2 * c;
    let attn = |c: usize| 4 * (c * c + c);
    let rest = |c: usize| 4 * c + (2 * c * c * e + c * e + c);
    assert_eq!(per_layer(&base), attn(c) + rest(c));
    assert_eq!(per_layer(&wide), attn(2 * c) + rest(2 * c));
    assert_eq!(attn(2 * c), 4 * attn(c) - 4 * 2 * c);
}

#[test]
fn encoder_is_identity_with_zero_output_projections() {
    let cfg = BookNetConfig::toy();
    let (net, mut store) = BookNet::init(cfg.clone(), 7).unwrap();
    zero_residual_projections(&net, &mut store);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let f = net.backbone_forward(&mut t, &p, &image(&cfg, 1)).unwrap();
    let pos = p[net.layout().pos_embed];
    let enc = net.encoder_forward(&mut t, &p, f, pos).unwrap();
    assert_eq!(t.value(enc), t.value(f));
}

#[test]
fn encoder_is_permutation_equivariant() {
    let mut cfg = BookNetConfig::tiny();
    cfg.height = 16;
    cfg.width = 16;
    let (net, store) = BookNet::init(cfg.clone(), 11).unwrap();
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let feats = Tensor::randn([c, 2, 2], 1.0, &mut rng);
    let pos = Tensor::randn([4, c], 1.0, &mut rng);
    let perm = [2usize, 0, 3, 1];
    let mut pf = vec![0.0; 4 * c];
    let mut pp = vec![0.0; 4 * c];
    for (dst, &src) in perm.iter().enumerate() {
        for ch in 0..c {
            pf[ch * 4 + dst] = feats.data()[ch * 4 + src];
            pp[dst * c + ch] = pos.data()[src * c + ch];
        }
    }
    let run = |f: Tensor, ps: Tensor| {
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let fv = t.constant(f);
        let pv = t.constant(ps);
        let out = net.encoder_forward(&mut t, &p, fv, pv).unwrap();
        t.value(out).clone()
    };
    let a = run(feats, pos);
    let b = run(Tensor::new([c, 2, 2], pf).unwrap(), Tensor::new([4, c], pp).unwrap());
    for (dst, &src) in perm.iter().enumerate() {
        for ch in 0..c {
            let d = (b.data()[ch * 4 + dst] - a.data()[ch * 4 + src]).abs();
            assert!(d < 1e-12, "token {dst} channel {ch}: {d}");
        }
    }
}

struct Stage1 {
    left: Tensor,
    right: Tensor,
}

fn stage1(net: &BookNet, store: &ParamStore, img: &Tensor) -> Stage1 {
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let f = net.backbone_forward(&mut t, &p, img).unwrap();
    let enc = net.encoder_forward(&mut t, &p, f, p[net.layout().pos_embed]).unwrap();
    let mem = grid_to_tokens(&mut t, enc).unwrap();
    let (l, r) = net
        .decoder_stage(&mut t, &p, 0, p[net.layout().query_left], p[net.layout().query_right], mem)
        .unwrap();
    Stage1 {
        left: t.value(l).clone(),
        right: t.value(r).clone(),
    }
}

#[test]
fn decoder_is_identity_with_zero_output_projections() {
    let cfg = BookNetConfig::toy();
    let (net, mut store) = BookNet::init(cfg.clone(), 8).unwrap();
    zero_residual_projections(&net, &mut store);
    let out = stage1(&net, &store, &image(&cfg, 3));
    assert_eq!(&out.left, store.get(net.layout().query_left));
    assert_eq!(&out.right, store.get(net.layout().query_right));
    assert_eq!(out.left.shape(), [12 * 6, 64]);
}

#[test]
fn stage_one_branches_are_isolated() {
    let cfg = BookNetConfig::toy();
    let (net, store) = BookNet::init(cfg.clone(), 9).unwrap();
    let img = image(&cfg, 4);
    let base = stage1(&net, &store, &img);

    let mut changed = store.clone();
    changed.get_mut(net.layout().query_right).data_mut()[5] += 1.0;
    for (name, _) in store.iter() {
        if name.starts_with("decoder.right.stage1") {
            let id = changed.id_of(name).unwrap();
            changed.get_mut(id).data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 0.1);
        }
    }
    let other = stage1(&net, &changed, &img);
    assert_eq!(base.left, other.left);
    assert_ne!(base.right, other.right);
}

fn exchange(net: &BookNet, store: &ParamStore, l: &Tensor, r: &Tensor) -> (Tensor, Tensor) {
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let (lv, rv) = (t.constant(l.clone()), t.constant(r.clone()));
    let (a, b) = net.cross_page_exchange(&mut t, &p, lv, rv).unwrap();
    (t.value(a).clone(), t.value(b).clone())
}

fn layer_norm_rows(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
    }
    out
}

#[test]
fn cross_page_toggle_and_zero_projection() {
    let mut cfg = BookNetConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let l = Tensor::randn([72, 64], 1.0, &mut rng);
    let r = Tensor::randn([72, 64], 1.0, &mut rng);

    cfg.cross_page_attention = false;
    let (net, store) = BookNet::init(cfg.clone(), 1).unwrap();
    let (a, b) = exchange(&net, &store, &l, &r);
    assert_eq!((a, b), (l.clone(), r.clone()));

    cfg.cross_page_attention = true;
    let (net, mut store) = BookNet::init(cfg, 1).unwrap();
    for e in [net.layout().exchange_left, net.layout().exchange_right] {
        store.get_mut(e.attn.o.w).data_mut().fill(0.0);
        store.get_mut(e.attn.o.b).data_mut().fill(0.0);
    }
    let (a, b) = exchange(&net, &store, &l, &r);
    assert!(a.max_abs_diff(&layer_norm_rows(&l)) < 1e-12);
    assert!(b.max_abs_diff(&layer_norm_rows(&r)) < 1e-12);
}

#[test]
fn cross_page_is_invariant_to_key_order() {
    let cfg = BookNetConfig::toy();
    let (net, store) = BookNet::init(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let l = Tensor::randn([72, 64], 1.0, &mut rng);
    let r = Tensor::randn([72, 64], 1.0, &mut rng);
    let mut rows: Vec<&[f64]> = r.data().chunks_exact(64).collect();
    rows.reverse();
    rows.swap(3, 40);
    let shuffled = Tensor::new([72, 64], rows.concat()).unwrap();
    let (a, _) = exchange(&net, &store, &l, &r);
    let (b, _) = exchange(&net, &store, &l, &shuffled);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let cfg = BookNetConfig::toy();
    let img = image(&cfg, 30);
    let (net, store) = BookNet::init(cfg.clone(), 31).unwrap();
    let (net2, store2) = BookNet::init(cfg, 31).unwrap();
    assert_eq!(store, store2);
    assert_eq!(net.predict(&store, &img).unwrap(), net2.predict(&store2, &img).unwrap());
}

#[test]
fn zero_image_with_zeroed_block_outputs_is_reproducible() {
    let cfg = BookNetConfig::toy();
    let (net, mut store) = BookNet::init(cfg.clone(), 4).unwrap();
    for b in net.layout().stages.iter().flatten() {
        store.get_mut(b.conv2.w).data_mut().fill(0.0);
    }
    let zero = Tensor::zeros([3, 96, 96]);
    let run = || {
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let f = net.backbone_forward(&mut t, &p, &zero).unwrap();
        t.value(f).clone()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.shape(), [64, 12, 12]);
    assert!(a.is_finite());
}

#[test]
fn fusion_ablation_keeps_shapes_and_stitches_coarse_flows() {
    let mut cfg = BookNetConfig::toy();
    cfg.use_fusion = false;
    let (net, store) = BookNet::init(cfg.clone(), 5).unwrap();
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let out = net.forward(&mut t, &p, &image(&cfg, 5)).unwrap();
    assert_eq!(t.shape(out.full), [96, 96, 2]);
    assert_eq!(t.shape(out.left), [96, 48, 2]);
    let (l, r, f) = (t.value(out.coarse_left), t.value(out.coarse_right), t.value(out.coarse_full));
    assert_eq!(f.shape(), [2, 12, 12]);
    for ch in 0..2 {
        for row in 0..12 {
            for col in 0..12 {
                let src = if col < 6 { l.data()[(ch * 12 + row) * 6 + col] } else { r.data()[(ch * 12 + row) * 6 + col - 6] };
                assert_eq!(f.data()[(ch * 12 + row) * 12 + col], src);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_through_model() {
    let cfg = BookNetConfig::tiny();
    let (_, store) = BookNet::init(cfg.clone(), 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bkpt");
    store.save(&path).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    BookNet::attach(cfg.clone(), &loaded).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());

    let mut other = cfg;
    other.channels = 16;
    assert!(matches!(
        BookNet::attach(other, &loaded),
        Err(booknet::Error::Mismatch(_))
    ));
}
