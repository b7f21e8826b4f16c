use super::config::BookNetConfig;
use super::layout::{Attention, Conv, DecoderLayer, Exchange, Ffn, FlowHead, Layout, Linear, Norm, ResBlock};
use crate::autodiff::{AttentionVars, Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, resize_flow, resize_image, WarpFlow};
use crate::tensor::Tensor;

/// Input images are shifted and scaled by these before the stem.
const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;

/// Tape outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FlowVars {
    /// `[H, W/2, 2]` flows for the left and right page.
    pub left: Var,
    pub right: Var,
    /// `[H, W, 2]` flow for the whole spread.
    pub full: Var,
    /// Coarse `[2, H/8, ·]` displacement fields before upsampling.
    pub coarse_left: Var,
    pub coarse_right: Var,
    pub coarse_full: Var,
}

/// Flows produced by inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub left: WarpFlow,
    pub right: WarpFlow,
    pub full: WarpFlow,
}

/// The network: configuration plus a map of where each weight lives.
#[derive(Clone, Debug)]
pub struct BookNet {
    config: BookNetConfig,
    layout: Layout,
}

fn conv(t: &mut Tape, p: &Bound, c: &Conv, x: Var) -> Result<Var> {
    let y = t.conv2d(x, p[c.w], c.stride, c.pad)?;
    t.add_bias(y, p[c.b], 0)
}

fn linear(t: &mut Tape, p: &Bound, l: &Linear, x: Var) -> Result<Var> {
    t.linear(x, p[l.w], p[l.b])
}

fn norm(t: &mut Tape, p: &Bound, n: &Norm, x: Var) -> Result<Var> {
    t.layer_norm(x, p[n.gain], p[n.bias])
}

fn attention_vars(p: &Bound, a: &Attention) -> AttentionVars {
    AttentionVars {
        wq: p[a.q.w],
        bq: p[a.q.b],
        wk: p[a.k.w],
        bk: p[a.k.b],
        wv: p[a.v.w],
        bv: p[a.v.b],
        wo: p[a.o.w],
        bo: p[a.o.b],
    }
}

fn ffn(t: &mut Tape, p: &Bound, f: &Ffn, x: Var) -> Result<Var> {
    let h = linear(t, p, &f.hidden, x)?;
    let h = t.relu(h);
    linear(t, p, &f.out, h)
}

fn res_block(t: &mut Tape, p: &Bound, b: &ResBlock, x: Var) -> Result<Var> {
    let h = conv(t, p, &b.conv1, x)?;
    let h = t.relu(h);
    let h = conv(t, p, &b.conv2, h)?;
    let s = match &b.shortcut {
        Some(c) => conv(t, p, c, x)?,
        None => x,
    };
    let y = t.add(s, h)?;
    Ok(t.relu(y))
}

/// `[C, h, w]` grid to `[h·w, C]` row-major tokens.
pub fn grid_to_tokens(t: &mut Tape, grid: Var) -> Result<Var> {
    let s = t.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("feature grid must be [C, h, w], got {s:?}")));
    }
    let flat = t.reshape(grid, &[s[0], s[1] * s[2]])?;
    t.transpose(flat)
}

/// `[h·w, C]` tokens back to a `[C, h, w]` grid.
pub fn tokens_to_grid(t: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = t.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::dim(format!("{s:?} tokens do not form a {h}×{w} grid")));
    }
    let tr = t.transpose(tokens)?;
    t.reshape(tr, &[s[1], h, w])
}

impl BookNet {
    /// Fresh network with seeded random weights.
    pub fn init(config: BookNetConfig, seed: u64) -> Result<(BookNet, ParamStore)> {
        let (layout, store) = Layout::init(&config, seed)?;
        Ok((BookNet { config, layout }, store))
    }

    /// Network over an existing parameter store, checking every name and shape.
    pub fn attach(config: BookNetConfig, store: &ParamStore) -> Result<BookNet> {
        let layout = Layout::attach(&config, store)?;
        Ok(BookNet { config, layout })
    }

    pub fn config(&self) -> &BookNetConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [3, self.config.height, self.config.width];
        if image.shape() != want {
            return Err(Error::dim(format!(
                "image {:?} does not match configured input {want:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// `[3, H, W]` image in `[0, 1]` to `[C, H/8, W/8]` features.
    pub fn backbone_forward(&self, t: &mut Tape, p: &Bound, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let x = t.constant(image.map(|v| (v - INPUT_MEAN) / INPUT_STD));
        let x = conv(t, p, &self.layout.stem, x)?;
        let mut x = t.relu(x);
        for block in self.layout.stages.iter().flatten() {
            x = res_block(t, p, block, x)?;
        }
        Ok(x)
    }

    /// Pre-norm self-attention layers over the flattened feature grid. The
    /// positional embedding `[h·w, C]` is added to queries and keys.
    pub fn encoder_forward(&self, t: &mut Tape, p: &Bound, features: Var, pos: Var) -> Result<Var> {
        let s = t.shape(features).to_vec();
        if s.len() != 3 || t.shape(pos) != [s[1] * s[2], s[0]] {
            return Err(Error::dim(format!(
                "encoder: features {s:?} with positions {:?}",
                t.shape(pos)
            )));
        }
        let mut x = grid_to_tokens(t, features)?;
        for layer in &self.layout.encoder {
            let h = norm(t, p, &layer.norm1, x)?;
            let hp = t.add(h, pos)?;
            let a = t.multi_head_attention(hp, hp, h, &attention_vars(p, &layer.attn), self.config.heads)?;
            x = t.add(x, a)?;
            let h = norm(t, p, &layer.norm2, x)?;
            let f = ffn(t, p, &layer.ffn, h)?;
            x = t.add(x, f)?;
        }
        tokens_to_grid(t, x, s[1], s[2])
    }

    fn decoder_layer(
        &self,
        t: &mut Tape,
        p: &Bound,
        l: &DecoderLayer,
        x: Var,
        memory: Var,
        pos: Var,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let h = norm(t, p, &l.norm_self, x)?;
        let a = t.multi_head_attention(h, h, h, &attention_vars(p, &l.self_attn), heads)?;
        let x = t.add(x, a)?;
        let m = norm(t, p, &l.norm_memory, memory)?;
        let mk = t.add(m, pos)?;
        let h = norm(t, p, &l.norm_cross, x)?;
        let a = t.multi_head_attention(h, mk, m, &attention_vars(p, &l.cross_attn), heads)?;
        let x = t.add(x, a)?;
        let h = norm(t, p, &l.norm_ffn, x)?;
        let f = ffn(t, p, &l.ffn, h)?;
        t.add(x, f)
    }

    /// One decoder stage (`0` or `1`) for both branches. `memory` is the
    /// encoder output as `[h·w, C]` tokens.
    pub fn decoder_stage(
        &self,
        t: &mut Tape,
        p: &Bound,
        stage: usize,
        left: Var,
        right: Var,
        memory: Var,
    ) -> Result<(Var, Var)> {
        let (qh, qw) = self.config.query_grid();
        let c = self.config.channels;
        for v in [left, right] {
            if t.shape(v) != [qh * qw, c] {
                return Err(Error::dim(format!(
                    "decoder stage {}: queries {:?}, expected [{}, {c}]",
                    stage + 1,
                    t.shape(v),
                    qh * qw
                )));
            }
        }
        let pos = p[self.layout.pos_embed];
        let (mut l, mut r) = (left, right);
        for layer in &self.layout.decoder_left[stage] {
            l = self.decoder_layer(t, p, layer, l, memory, pos)?;
        }
        for layer in &self.layout.decoder_right[stage] {
            r = self.decoder_layer(t, p, layer, r, memory, pos)?;
        }
        Ok((l, r))
    }

    fn exchange_one(&self, t: &mut Tape, p: &Bound, e: &Exchange, own: Var, other: Var) -> Result<Var> {
        let a = t.multi_head_attention(own, other, other, &attention_vars(p, &e.attn), self.config.heads)?;
        let s = t.add(own, a)?;
        norm(t, p, &e.norm, s)
    }

    /// Each page's tokens attend to the other page's, then residual and LN.
    /// Passes both inputs through unchanged when cross-page attention is off.
    pub fn cross_page_exchange(&self, t: &mut Tape, p: &Bound, left: Var, right: Var) -> Result<(Var, Var)> {
        if t.shape(left) != t.shape(right) {
            return Err(Error::dim(format!(
                "cross-page exchange: {:?} vs {:?}",
                t.shape(left),
                t.shape(right)
            )));
        }
        if !self.config.cross_page_attention {
            return Ok((left, right));
        }
        let l = self.exchange_one(t, p, &self.layout.exchange_left, left, right)?;
        let r = self.exchange_one(t, p, &self.layout.exchange_right, right, left)?;
        Ok((l, r))
    }

    fn head(&self, t: &mut Tape, p: &Bound, h: &FlowHead, grid: Var) -> Result<(Var, Var)> {
        Ok((conv(t, p, &h.flow, grid)?, conv(t, p, &h.upsample, grid)?))
    }

    /// Upsample a coarse displacement and add it to the identity `base [H, W, 2]`.
    fn to_flow(t: &mut Tape, disp: Var, logits: Var, base: &Tensor) -> Result<Var> {
        let up = t.convex_upsample(disp, logits)?;
        let hw2 = t.permute(up, &[1, 2, 0])?;
        let base = t.constant(base.clone());
        t.add(hw2, base)
    }

    /// Flow heads on each page grid, fusion along the width, and the full head.
    pub fn fuse_and_predict(&self, t: &mut Tape, p: &Bound, left: Var, right: Var) -> Result<FlowVars> {
        let (qh, qw) = self.config.query_grid();
        let gl = tokens_to_grid(t, left, qh, qw)?;
        let gr = tokens_to_grid(t, right, qh, qw)?;
        let (disp_l, up_l) = self.head(t, p, &self.layout.head_left, gl)?;
        let (disp_r, up_r) = self.head(t, p, &self.layout.head_right, gr)?;
        let concat = t.concat(&[gl, gr], 2)?;
        let (disp_f, up_f) = if self.config.use_fusion {
            let f = conv(t, p, &self.layout.fusion[0], concat)?;
            let f = t.relu(f);
            let f = conv(t, p, &self.layout.fusion[1], f)?;
            let f = t.relu(f);
            self.head(t, p, &self.layout.head_full, f)?
        } else {
            let disp = t.concat(&[disp_l, disp_r], 2)?;
            (disp, conv(t, p, &self.layout.head_full.upsample, concat)?)
        };
        let full_id = WarpFlow::identity(self.config.height, self.config.width);
        let (id_l, id_r) = full_id.split_pages()?;
        Ok(FlowVars {
            left: Self::to_flow(t, disp_l, up_l, &id_l.to_tensor())?,
            right: Self::to_flow(t, disp_r, up_r, &id_r.to_tensor())?,
            full: Self::to_flow(t, disp_f, up_f, &full_id.to_tensor())?,
            coarse_left: disp_l,
            coarse_right: disp_r,
            coarse_full: disp_f,
        })
    }

    /// The whole network on one `[3, H, W]` image.
    pub fn forward(&self, t: &mut Tape, p: &Bound, image: &Tensor) -> Result<FlowVars> {
        let features = self.backbone_forward(t, p, image)?;
        let enc = self.encoder_forward(t, p, features, p[self.layout.pos_embed])?;
        let memory = grid_to_tokens(t, enc)?;
        let (l1, r1) = self.decoder_stage(t, p, 0, p[self.layout.query_left], p[self.layout.query_right], memory)?;
        let (lx, rx) = self.cross_page_exchange(t, p, l1, r1)?;
        let (l2, r2) = self.decoder_stage(t, p, 1, lx, rx, memory)?;
        self.fuse_and_predict(t, p, l2, r2)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<Prediction> {
        let mut t = Tape::new();
        let p = params.bind_frozen(&mut t);
        let out = self.forward(&mut t, &p, image)?;
        let flow = |v: Var| WarpFlow::from_tensor(t.value(v));
        Ok(Prediction {
            left: flow(out.left)?,
            right: flow(out.right)?,
            full: flow(out.full)?,
        })
    }

    /// Rectify an image of any size: resize to the network input, predict,
    /// resize the spread flow back to the image's extents and sample.
    pub fn rectify(&self, params: &ParamStore, image: &Tensor) -> Result<Rectified> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::dim(format!("image must be [3, H, W], got {s:?}"))),
        };
        let input = resize_image(image, self.config.height, self.config.width)?;
        let prediction = self.predict(params, &input)?;
        let flow = resize_flow(&prediction.full, h, w)?;
        let image = bilinear_sample(image, &flow)?;
        Ok(Rectified {
            image,
            flow,
            prediction,
        })
    }
}

/// Output of [`BookNet::rectify`].
#[derive(Clone, Debug)]
pub struct Rectified {
    pub image: Tensor,
    /// Spread flow at the image's resolution.
    pub flow: WarpFlow,
    /// Flows at the network's resolution.
    pub prediction: Prediction,
}
