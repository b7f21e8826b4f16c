//! Forward rules. Each op validates shapes, computes its value and records
//! what its backward rule needs.

use super::kernels::{self, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{sample, upsample};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection weights of one multi-head attention block, as tape variables.
/// Weights are `[C_in × C]` (applied as `x · W`), biases `[C]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// Add a rank-1 `bias` along `axis` of `x`. The only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "add_bias")?;
        let shape = self.shape(x).to_vec();
        if self.shape(bias) != [shape[axis]] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match axis {axis} of {shape:?}",
                self.shape(bias)
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i / inner) % len];
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Layer normalization over the last (channel) axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("tensors have rank ≥ 1");
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match channels {c}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.value(x).numel() / c;
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let mut out = self.value(x).data().to_vec();
        for_each_lane(&shape, axis, |offset, len, stride| {
            kernels::softmax_strided(&mut out, offset, len, stride)
        });
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim(format!("permute: {axes:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, out) = kernels::permute(self.value(x).data(), &shape, axes);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Contiguous range `[start, start+len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    /// Split `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check_axis(x, axis, "split")?;
        if sizes.iter().sum::<usize>() != self.shape(x)[axis] {
            return Err(Error::dim(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape(x)
            )));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// 2-D cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::dim(format!("conv2d: input {sx:?}, kernel {sw:?}")));
        }
        let k = sw[2];
        if k % 2 == 0 || stride == 0 {
            return Err(Error::dim(format!("conv2d: kernel {k} must be odd, stride {stride} positive")));
        }
        if sx[1] + 2 * pad < k || sx[2] + 2 * pad < k {
            return Err(Error::dim(format!(
                "conv2d: kernel {k} larger than padded input {}×{}",
                sx[1] + 2 * pad,
                sx[2] + 2 * pad
            )));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            k,
            stride,
            pad,
            h_out: (sx[1] + 2 * pad - k) / stride + 1,
            w_out: (sx[2] + 2 * pad - k) / stride + 1,
        };
        let c_out = sw[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let out = if geom.is_pointwise() {
            kernels::matmul(wv, xv, c_out, geom.c_in, geom.out_len())
        } else {
            let cols = kernels::im2col(xv, &geom);
            kernels::matmul(wv, &cols, c_out, geom.patch_len(), geom.out_len())
        };
        Ok(self.push(
            Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out),
            Op::Conv2d { x, w, geom },
            &[x, w],
        ))
    }

    /// `x[L×in] · W[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b, 1)
    }

    /// Scaled dot-product attention for one head:
    /// `softmax(scale · q kᵀ) v` with `q[Lq×d]`, `k[Lk×d]`, `v[Lk×dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::dim(format!("attention: q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let (lq, d, lk, dv) = (sq[0], sq[1], sk[0], sv[1]);
        let mut probs = vec![0.0; lq * lk];
        kernels::gemm(
            lq,
            d,
            lk,
            scale,
            self.value(q).data(),
            (d as isize, 1),
            self.value(k).data(),
            (1, d as isize),
            0.0,
            &mut probs,
            lk as isize,
        );
        for r in 0..lq {
            kernels::softmax_strided(&mut probs, r * lk, lk, 1);
        }
        let out = kernels::matmul(&probs, self.value(v).data(), lq, lk, dv);
        Ok(self.push(
            Tensor::from_parts(vec![lq, dv], out),
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Multi-head attention with per-head scale `1/sqrt(C/heads)`. Queries come
    /// from `query[Lq×C]`, keys from `key[Lk×C]`, values from `value[Lk×C]`.
    pub fn multi_head_attention(
        &mut self,
        query: Var,
        key: Var,
        value: Var,
        weights: &AttentionVars,
        heads: usize,
    ) -> Result<Var> {
        let c = self.shape(weights.wq)[1];
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("channels {c} not divisible by {heads} heads")));
        }
        let q = self.linear(query, weights.wq, weights.bq)?;
        let k = self.linear(key, weights.wk, weights.bk)?;
        let v = self.linear(value, weights.wv, weights.bv)?;
        let head_dim = c / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let out = if heads == 1 {
            self.attention(q, k, v, scale)?
        } else {
            let sizes = vec![head_dim; heads];
            let qs = self.split(q, 1, &sizes)?;
            let ks = self.split(k, 1, &sizes)?;
            let vs = self.split(v, 1, &sizes)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                outs.push(self.attention(qs[h], ks[h], vs[h], scale)?);
            }
            self.concat(&outs, 1)?
        };
        self.linear(out, weights.wo, weights.bo)
    }

    /// Differentiable backward warp of `src[C×Hs×Ws]` by `flow[H×W×2]`
    /// (normalized `(u, v)` source coordinates, border clamped).
    pub fn bilinear_sample(&mut self, src: Var, flow: Var) -> Result<Var> {
        let out = sample::sample_forward(self.value(src), self.value(flow))?;
        Ok(self.push(out, Op::BilinearSample { src, flow }, &[src, flow]))
    }

    /// Convex ×8 upsampling of `coarse[C×h×w]` using mixture logits `[576×h×w]`.
    pub fn convex_upsample(&mut self, coarse: Var, logits: Var) -> Result<Var> {
        let (out, weights) = upsample::upsample_forward(self.value(coarse), self.value(logits))?;
        Ok(self.push(
            out,
            Op::ConvexUpsample {
                coarse,
                logits,
                weights,
            },
            &[coarse, logits],
        ))
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(format!(
                "l1: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let p = self.value(pred).data();
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Visit every 1-D lane along `axis`: `(offset, len, stride)`.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, len, inner);
        }
    }
}
