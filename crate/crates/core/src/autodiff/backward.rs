//! Backward rules, one per [`Op`] variant.

use super::kernels;
use super::ops::for_each_lane;
use super::{GradSink, Node, Op};
use crate::geometry::{sample, upsample};

pub(super) fn apply(node: &Node, grad: &[f64], sink: &mut GradSink<'_>) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (sa, sb) = (sink.value(*a).shape().to_vec(), sink.value(*b).shape().to_vec());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if sink.wants(*a) {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                kernels::gemm(
                    m,
                    n,
                    k,
                    1.0,
                    grad,
                    (n as isize, 1),
                    sink.value(*b).data(),
                    (1, n as isize),
                    0.0,
                    &mut da,
                    k as isize,
                );
                sink.add(*a, da);
            }
            if sink.wants(*b) {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                kernels::gemm(
                    k,
                    m,
                    n,
                    1.0,
                    sink.value(*a).data(),
                    (1, k as isize),
                    grad,
                    (n as isize, 1),
                    0.0,
                    &mut db,
                    n as isize,
                );
                sink.add(*b, db);
            }
        }
        Op::Add { a, b } => {
            sink.add(*a, grad.to_vec());
            sink.add(*b, grad.to_vec());
        }
        Op::Sub { a, b } => {
            sink.add(*a, grad.to_vec());
            sink.add(*b, grad.iter().map(|g| -g).collect());
        }
        Op::Mul { a, b } => {
            if sink.wants(*a) {
                let g = grad.iter().zip(sink.value(*b).data()).map(|(g, y)| g * y).collect();
                sink.add(*a, g);
            }
            if sink.wants(*b) {
                let g = grad.iter().zip(sink.value(*a).data()).map(|(g, x)| g * x).collect();
                sink.add(*b, g);
            }
        }
        Op::Scale { x, factor } => sink.add(*x, grad.iter().map(|g| g * factor).collect()),
        Op::AddBias { x, bias, axis } => {
            sink.add(*x, grad.to_vec());
            if sink.wants(*bias) {
                let shape = sink.value(*x).shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = shape[*axis];
                let mut gb = vec![0.0; len];
                for (i, g) in grad.iter().enumerate() {
                    gb[(i / inner) % len] += g;
                }
                sink.add(*bias, gb);
            }
        }
        Op::Relu { x } => {
            let g = grad
                .iter()
                .zip(sink.value(*x).data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            sink.add(*x, g);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = *sink.value(*x).shape().last().unwrap();
            let rows = rstd.len();
            if sink.wants(*x) {
                let g = sink.value(*gain).data().to_vec();
                let mut dx = vec![0.0; grad.len()];
                for r in 0..rows {
                    let dy = &grad[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = dy[j] * g[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (dy[j] * g[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                sink.add(*x, dx);
            }
            if sink.wants(*gain) {
                let mut dg = vec![0.0; c];
                for (i, (d, h)) in grad.iter().zip(xhat).enumerate() {
                    dg[i % c] += d * h;
                }
                sink.add(*gain, dg);
            }
            if sink.wants(*bias) {
                let mut db = vec![0.0; c];
                for (i, d) in grad.iter().enumerate() {
                    db[i % c] += d;
                }
                sink.add(*bias, db);
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for_each_lane(node.value.shape(), *axis, |offset, len, stride| {
                let mut dot = 0.0;
                for i in 0..len {
                    let p = offset + i * stride;
                    dot += grad[p] * y[p];
                }
                for i in 0..len {
                    let p = offset + i * stride;
                    dx[p] = y[p] * (grad[p] - dot);
                }
            });
            sink.add(*x, dx);
        }
        Op::Reshape { x } => sink.add(*x, grad.to_vec()),
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (_, dx) = kernels::permute(grad, node.value.shape(), &inverse);
            sink.add(*x, dx);
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut start = 0;
            for &v in inputs {
                let chunk = sink.value(v).shape()[*axis] * inner;
                if sink.wants(v) {
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        g.extend_from_slice(&grad[o * total + start..o * total + start + chunk]);
                    }
                    sink.add(v, g);
                }
                start += chunk;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = sink.value(*x).shape().to_vec();
            let len = node.value.shape()[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut dx = vec![0.0; sink.value(*x).numel()];
            for o in 0..outer {
                let base = (o * shape[*axis] + start) * inner;
                dx[base..base + len * inner]
                    .copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
            }
            sink.add(*x, dx);
        }
        Op::Sum { x } => {
            let n = sink.value(*x).numel();
            sink.add(*x, vec![grad[0]; n]);
        }
        Op::Mean { x } => {
            let n = sink.value(*x).numel();
            sink.add(*x, vec![grad[0] / n as f64; n]);
        }
        Op::Conv2d { x, w, geom } => {
            let c_out = sink.value(*w).shape()[0];
            let n_out = geom.out_len();
            let pointwise = geom.is_pointwise();
            let cols = if pointwise {
                None
            } else {
                Some(kernels::im2col(sink.value(*x).data(), geom))
            };
            let cols_ref: &[f64] = cols.as_deref().unwrap_or_else(|| sink.value(*x).data());
            if sink.wants(*w) {
                // dW = dY · colsᵀ
                let p = geom.patch_len();
                let mut dw = vec![0.0; c_out * p];
                kernels::gemm(
                    c_out,
                    n_out,
                    p,
                    1.0,
                    grad,
                    (n_out as isize, 1),
                    cols_ref,
                    (1, n_out as isize),
                    0.0,
                    &mut dw,
                    p as isize,
                );
                sink.add(*w, dw);
            }
            if sink.wants(*x) {
                // dcols = Wᵀ · dY
                let p = geom.patch_len();
                let mut dcols = vec![0.0; p * n_out];
                kernels::gemm(
                    p,
                    c_out,
                    n_out,
                    1.0,
                    sink.value(*w).data(),
                    (1, p as isize),
                    grad,
                    (n_out as isize, 1),
                    0.0,
                    &mut dcols,
                    n_out as isize,
                );
                if pointwise {
                    sink.add(*x, dcols);
                } else {
                    let mut dx = vec![0.0; sink.value(*x).numel()];
                    kernels::col2im_add(&dcols, geom, &mut dx);
                    sink.add(*x, dx);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            scale,
            probs,
        } => {
            let (lq, d) = (sink.value(*q).shape()[0], sink.value(*q).shape()[1]);
            let lk = sink.value(*k).shape()[0];
            let dv = sink.value(*v).shape()[1];
            if sink.wants(*v) {
                // dV = Pᵀ · dO
                let mut gv = vec![0.0; lk * dv];
                kernels::gemm(
                    lk,
                    lq,
                    dv,
                    1.0,
                    probs,
                    (1, lk as isize),
                    grad,
                    (dv as isize, 1),
                    0.0,
                    &mut gv,
                    dv as isize,
                );
                sink.add(*v, gv);
            }
            if !(sink.wants(*q) || sink.wants(*k)) {
                return;
            }
            // dP = dO · Vᵀ, then through the row softmax
            let mut ds = vec![0.0; lq * lk];
            kernels::gemm(
                lq,
                dv,
                lk,
                1.0,
                grad,
                (dv as isize, 1),
                sink.value(*v).data(),
                (1, dv as isize),
                0.0,
                &mut ds,
                lk as isize,
            );
            for r in 0..lq {
                let row = &mut ds[r * lk..(r + 1) * lk];
                let p = &probs[r * lk..(r + 1) * lk];
                let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, pi) in row.iter_mut().zip(p) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            if sink.wants(*q) {
                let gq = kernels::matmul(&ds, sink.value(*k).data(), lq, lk, d);
                sink.add(*q, gq);
            }
            if sink.wants(*k) {
                let mut gk = vec![0.0; lk * d];
                kernels::gemm(
                    lk,
                    lq,
                    d,
                    1.0,
                    &ds,
                    (1, lk as isize),
                    sink.value(*q).data(),
                    (d as isize, 1),
                    0.0,
                    &mut gk,
                    d as isize,
                );
                sink.add(*k, gk);
            }
        }
        Op::BilinearSample { src, flow } => {
            let (gsrc, gflow) = sample::sample_backward(
                sink.value(*src),
                sink.value(*flow),
                grad,
                sink.wants(*src),
                sink.wants(*flow),
            );
            if let Some(g) = gsrc {
                sink.add(*src, g);
            }
            if let Some(g) = gflow {
                sink.add(*flow, g);
            }
        }
        Op::ConvexUpsample {
            coarse,
            logits,
            weights,
        } => {
            let (gc, gl) = upsample::upsample_backward(
                sink.value(*coarse),
                weights,
                grad,
                sink.wants(*coarse),
                sink.wants(*logits),
            );
            if let Some(g) = gc {
                sink.add(*coarse, g);
            }
            if let Some(g) = gl {
                sink.add(*logits, g);
            }
        }
        Op::L1 { pred, target } => {
            let n = target.numel() as f64;
            let g = sink
                .value(*pred)
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| {
                    let d = p - t;
                    if d > 0.0 {
                        grad[0] / n
                    } else if d < 0.0 {
                        -grad[0] / n
                    } else {
                        0.0
                    }
                })
                .collect();
            sink.add(*pred, g);
        }
    }
}
