//! Parameter layout: which named tensors exist for a configuration, in what
//! order, and how they are initialized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::BookNetConfig;
use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_logits, LOGIT_CHANNELS};
use crate::tensor::Tensor;

/// Flow head weights are drawn with this standard deviation so the initial
/// prediction stays within a tiny fraction of a pixel of the identity grid.
pub const FLOW_HEAD_STD: f64 = 1e-4;
const UPSAMPLE_HEAD_STD: f64 = 1e-2;

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm_self: Norm,
    pub self_attn: Attention,
    pub norm_memory: Norm,
    pub norm_cross: Norm,
    pub cross_attn: Attention,
    pub norm_ffn: Norm,
    pub ffn: Ffn,
}

/// Attention from one page's tokens to the other page's, followed by LN.
#[derive(Clone, Copy, Debug)]
pub struct Exchange {
    pub attn: Attention,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub struct FlowHead {
    /// 3×3 conv to the two displacement channels.
    pub flow: Conv,
    /// 1×1 conv to the convex-upsampling logits.
    pub upsample: Conv,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub stem: Conv,
    pub stages: [Vec<ResBlock>; 2],
    pub pos_embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub query_left: ParamId,
    pub query_right: ParamId,
    /// Decoder layers indexed `[stage][layer]`.
    pub decoder_left: [Vec<DecoderLayer>; 2],
    pub decoder_right: [Vec<DecoderLayer>; 2],
    /// Left queries attending to right features, and the reverse.
    pub exchange_left: Exchange,
    pub exchange_right: Exchange,
    pub fusion: [Conv; 2],
    pub head_left: FlowHead,
    pub head_right: FlowHead,
    pub head_full: FlowHead,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Data(Vec<f64>),
}

/// Either creates parameters or walks an existing store, checking that the
/// names and shapes line up with what this configuration expects.
struct Builder<'a> {
    store: ParamStore,
    rng: ChaCha8Rng,
    existing: Option<&'a ParamStore>,
    next: usize,
    mismatch: Option<String>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        if let Some(existing) = self.existing {
            let id = ParamId::from_index(self.next);
            self.next += 1;
            if self.mismatch.is_none() {
                if id.index() >= existing.len() {
                    self.mismatch = Some(format!("missing entry {name}"));
                } else if existing.name(id) != name || existing.get(id).shape() != shape {
                    self.mismatch = Some(format!(
                        "entry {}: expected {name} {shape:?}, found {} {:?}",
                        id.index(),
                        existing.name(id),
                        existing.get(id).shape()
                    ));
                }
            }
            return id;
        }
        let tensor = match init {
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Data(d) => Tensor::new(shape, d).expect("init data matches shape"),
        };
        self.store.add(name, tensor)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, std: f64) -> Conv {
        Conv {
            w: self.param(format!("{name}.w"), vec![c_out, c_in, k, k], Init::Normal(std)),
            b: self.param(format!("{name}.b"), vec![c_out], Init::Zeros),
            stride,
            pad: k / 2,
        }
    }

    fn he_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.conv(name, c_in, c_out, k, stride, std)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.param(
                format!("{name}.w"),
                vec![d_in, d_out],
                Init::Normal((1.0 / d_in as f64).sqrt()),
            ),
            b: self.param(format!("{name}.b"), vec![d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gain: self.param(format!("{name}.gain"), vec![c], Init::Ones),
            bias: self.param(format!("{name}.bias"), vec![c], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, c: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), c, c),
            k: self.linear(&format!("{name}.k"), c, c),
            v: self.linear(&format!("{name}.v"), c, c),
            o: self.linear(&format!("{name}.o"), c, c),
        }
    }

    fn ffn(&mut self, name: &str, c: usize, expansion: usize) -> Ffn {
        Ffn {
            hidden: self.linear(&format!("{name}.hidden"), c, c * expansion),
            out: self.linear(&format!("{name}.out"), c * expansion, c),
        }
    }

    fn res_block(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> ResBlock {
        let conv1 = self.he_conv(&format!("{name}.conv1"), c_in, c_out, 3, stride);
        // the residual branch starts small relative to the shortcut
        let std2 = 0.5 * (2.0 / (c_out * 9) as f64).sqrt();
        let conv2 = self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1, std2);
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| self.he_conv(&format!("{name}.shortcut"), c_in, c_out, 1, stride));
        ResBlock { conv1, conv2, shortcut }
    }

    fn decoder_layer(&mut self, name: &str, cfg: &BookNetConfig) -> DecoderLayer {
        let c = cfg.channels;
        DecoderLayer {
            norm_self: self.norm(&format!("{name}.norm_self"), c),
            self_attn: self.attention(&format!("{name}.self_attn"), c),
            norm_memory: self.norm(&format!("{name}.norm_memory"), c),
            norm_cross: self.norm(&format!("{name}.norm_cross"), c),
            cross_attn: self.attention(&format!("{name}.cross_attn"), c),
            norm_ffn: self.norm(&format!("{name}.norm_ffn"), c),
            ffn: self.ffn(&format!("{name}.ffn"), c, cfg.ffn_expansion),
        }
    }

    fn flow_head(&mut self, name: &str, c: usize) -> FlowHead {
        let flow = self.conv(&format!("{name}.flow"), c, 2, 3, 1, FLOW_HEAD_STD);
        let w = self.param(
            format!("{name}.upsample.w"),
            vec![LOGIT_CHANNELS, c, 1, 1],
            Init::Normal(UPSAMPLE_HEAD_STD),
        );
        let b = self.param(
            format!("{name}.upsample.b"),
            vec![LOGIT_CHANNELS],
            Init::Data(bilinear_logits()),
        );
        FlowHead {
            flow,
            upsample: Conv { w, b, stride: 1, pad: 0 },
        }
    }
}

/// Fixed 2-D sine/cosine pattern used as the starting point of the learnable
/// positional embedding: the first half of the channels encodes the row, the
/// second half the column.
pub fn sinusoidal_positions(h: usize, w: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; h * w * c];
    let encode = |pos: usize, i: usize, n: usize| -> f64 {
        let pairs = n.div_ceil(2).max(1);
        let freq = 1.0 / 10000f64.powf((i / 2) as f64 / pairs as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for r in 0..h {
        for col in 0..w {
            let t = &mut out[(r * w + col) * c..][..c];
            for (i, v) in t.iter_mut().enumerate() {
                *v = if i < half {
                    encode(r, i, half)
                } else {
                    encode(col, i - half, c - half)
                };
            }
        }
    }
    out
}

fn build(cfg: &BookNetConfig, b: &mut Builder) -> Layout {
    let c = cfg.channels;
    let [c0, c1] = cfg.backbone_channels;
    let stem = b.he_conv("backbone.stem", 3, c0, 7, 2);
    let mut stages: [Vec<ResBlock>; 2] = Default::default();
    for (s, (c_in, c_out)) in [(c0, c1), (c1, c)].into_iter().enumerate() {
        for i in 0..cfg.backbone_blocks[s] {
            let (cin, stride) = if i == 0 { (c_in, 2) } else { (c_out, 1) };
            stages[s].push(b.res_block(&format!("backbone.stage{}.block{i}", s + 1), cin, c_out, stride));
        }
    }
    let (fh, fw) = cfg.feature_grid();
    let pos_embed = b.param(
        "encoder.pos_embed".into(),
        vec![fh * fw, c],
        Init::Data(sinusoidal_positions(fh, fw, c)),
    );
    let encoder = (0..cfg.encoder_layers)
        .map(|i| {
            let name = format!("encoder.layer{i}");
            EncoderLayer {
                norm1: b.norm(&format!("{name}.norm1"), c),
                attn: b.attention(&format!("{name}.attn"), c),
                norm2: b.norm(&format!("{name}.norm2"), c),
                ffn: b.ffn(&format!("{name}.ffn"), c, cfg.ffn_expansion),
            }
        })
        .collect();
    let (qh, qw) = cfg.query_grid();
    let query_left = b.param("decoder.left.queries".into(), vec![qh * qw, c], Init::Normal(1.0));
    let query_right = b.param("decoder.right.queries".into(), vec![qh * qw, c], Init::Normal(1.0));
    let mut decoder_left: [Vec<DecoderLayer>; 2] = Default::default();
    let mut decoder_right: [Vec<DecoderLayer>; 2] = Default::default();
    for stage in 0..2 {
        for i in 0..cfg.decoder_layers[stage] {
            decoder_left[stage].push(b.decoder_layer(&format!("decoder.left.stage{}.layer{i}", stage + 1), cfg));
        }
        for i in 0..cfg.decoder_layers[stage] {
            decoder_right[stage].push(b.decoder_layer(&format!("decoder.right.stage{}.layer{i}", stage + 1), cfg));
        }
    }
    let exchange_left = Exchange {
        attn: b.attention("exchange.left.attn", c),
        norm: b.norm("exchange.left.norm", c),
    };
    let exchange_right = Exchange {
        attn: b.attention("exchange.right.attn", c),
        norm: b.norm("exchange.right.norm", c),
    };
    let fusion = [b.he_conv("fusion.conv1", c, c, 3, 1), b.he_conv("fusion.conv2", c, c, 3, 1)];
    Layout {
        stem,
        stages,
        pos_embed,
        encoder,
        query_left,
        query_right,
        decoder_left,
        decoder_right,
        exchange_left,
        exchange_right,
        fusion,
        head_left: b.flow_head("head.left", c),
        head_right: b.flow_head("head.right", c),
        head_full: b.flow_head("head.full", c),
    }
}

impl Layout {
    /// Create freshly initialized parameters.
    pub fn init(cfg: &BookNetConfig, seed: u64) -> Result<(Layout, ParamStore)> {
        cfg.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            existing: None,
            next: 0,
            mismatch: None,
        };
        let layout = build(cfg, &mut b);
        Ok((layout, b.store))
    }

    /// Map an existing store onto this configuration.
    pub fn attach(cfg: &BookNetConfig, store: &ParamStore) -> Result<Layout> {
        cfg.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            existing: Some(store),
            next: 0,
            mismatch: None,
        };
        let layout = build(cfg, &mut b);
        if let Some(m) = b.mismatch {
            return Err(Error::Mismatch(m));
        }
        if b.next != store.len() {
            return Err(Error::Mismatch(format!(
                "store has {} entries, configuration expects {}",
                store.len(),
                b.next
            )));
        }
        Ok(layout)
    }

    /// Every output projection of the transformer blocks (attention output
    /// and second feed-forward linear), as `(weight, bias)` pairs.
    pub fn residual_projections(&self) -> Vec<Linear> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.extend([l.attn.o, l.ffn.out]);
        }
        for l in self.decoder_left.iter().chain(&self.decoder_right).flatten() {
            out.extend([l.self_attn.o, l.cross_attn.o, l.ffn.out]);
        }
        out
    }
}
