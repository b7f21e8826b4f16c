//! Finite-difference self-check of every differentiable operation and of the
//! full network with its training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, AttentionVars, Bound, GradCheckOptions, Tape, Var};
use crate::error::Result;
use crate::geometry::WarpFlow;
use crate::model::{BookNet, BookNetConfig};
use crate::tensor::Tensor;
use crate::train::{multitask_l1, FlowTargets, Supervision};

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the network plus loss.
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn table(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4);
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{:<w$}  max rel err {:.3e}  (tol {:.0e}, {} probes)  {}\n",
                c.name,
                c.max_rel_err,
                c.tol,
                c.checked,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so kinks (relu, |x|) stay out of reach of
/// the difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduce an output to a scalar through a fixed random projection, so every
/// element contributes with its own weight.
fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(out).to_vec();
    let r = t.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let m = t.mul(out, r)?;
    Ok(t.sum(m))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn attention_weights(v: &[Var]) -> AttentionVars {
    AttentionVars {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

/// Flow whose sample points sit a quarter pixel inside a cell, away from the
/// bilinear kinks at pixel centers.
fn quarter_offset_flow(h: usize, w: usize, src_h: usize, src_w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut d = Vec::with_capacity(h * w * 2);
    for _ in 0..h * w {
        let px = rng.gen_range(0..src_w - 1) as f64 + 0.25 + 0.5 * rng.gen_range(0..2) as f64;
        let py = rng.gen_range(0..src_h - 1) as f64 + 0.25 + 0.5 * rng.gen_range(0..2) as f64;
        d.push(2.0 * px / (src_w - 1) as f64 - 1.0);
        d.push(2.0 * py / (src_h - 1) as f64 - 1.0);
    }
    Tensor::from_parts(vec![h, w, 2], d)
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut att = vec![uniform(&[3, 8], -1.0, 1.0, r), uniform(&[5, 8], -1.0, 1.0, r), uniform(&[5, 8], -1.0, 1.0, r)];
    for _ in 0..4 {
        att.push(uniform(&[8, 8], -0.5, 0.5, r));
        att.push(uniform(&[8], -0.2, 0.2, r));
    }
    vec![
        case("matmul", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }),
        case("add", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 2)
        }),
        case("sub", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 3)
        }),
        case("mul", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 4)
        }),
        case("scale", vec![uniform(&[4], -1.0, 1.0, r)], |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, 5)
        }),
        case("add_bias", vec![uniform(&[3, 2, 2], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)], |t, v| {
            let y = t.add_bias(v[0], v[1], 0)?;
            project(t, y, 6)
        }),
        case("relu", vec![away_from_zero(&[3, 4], r)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 7)
        }),
        case(
            "layer_norm",
            vec![uniform(&[4, 6], -2.0, 2.0, r), uniform(&[6], 0.5, 1.5, r), uniform(&[6], -0.5, 0.5, r)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, 8)
            },
        ),
        case("softmax", vec![uniform(&[3, 5], -2.0, 2.0, r)], |t, v| {
            let a = t.softmax(v[0], 1)?;
            let b = t.softmax(v[0], 0)?;
            let y = t.add(a, b)?;
            project(t, y, 9)
        }),
        case("reshape_permute", vec![uniform(&[2, 3, 4], -1.0, 1.0, r)], |t, v| {
            let a = t.permute(v[0], &[2, 0, 1])?;
            let b = t.reshape(a, &[4, 6])?;
            let c = t.transpose(b)?;
            project(t, c, 10)
        }),
        case("concat_split", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 2], -1.0, 1.0, r)], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let parts = t.split(c, 1, &[1, 4])?;
            let s = t.slice(parts[1], 0, 1, 1)?;
            let a = project(t, parts[0], 11)?;
            let b = project(t, s, 12)?;
            t.add(a, b)
        }),
        case("sum_mean", vec![uniform(&[3, 3], -1.0, 1.0, r)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.sum(sq);
            let b = t.mean(v[0]);
            let b = t.scale(b, 3.0);
            t.add(a, b)
        }),
        case("conv2d", vec![uniform(&[3, 7, 7], -1.0, 1.0, r), uniform(&[2, 3, 5, 5], -0.5, 0.5, r)], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 2)?;
            project(t, y, 13)
        }),
        case(
            "conv2d_strided",
            vec![uniform(&[2, 8, 7], -1.0, 1.0, r), uniform(&[3, 2, 3, 3], -0.5, 0.5, r)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1)?;
                project(t, y, 14)
            },
        ),
        case(
            "linear",
            vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 2], -1.0, 1.0, r), uniform(&[2], -1.0, 1.0, r)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, 15)
            },
        ),
        case(
            "attention",
            vec![uniform(&[3, 8], -1.0, 1.0, r), uniform(&[4, 8], -1.0, 1.0, r), uniform(&[4, 8], -1.0, 1.0, r)],
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], 0.35)?;
                project(t, y, 16)
            },
        ),
        case("multi_head_attention", att, |t, v| {
            let w = attention_weights(&v[3..]);
            let y = t.multi_head_attention(v[0], v[1], v[2], &w, 2)?;
            project(t, y, 17)
        }),
        case(
            "bilinear_sample",
            vec![uniform(&[2, 5, 6], 0.0, 1.0, r), quarter_offset_flow(3, 4, 5, 6, r)],
            |t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                project(t, y, 18)
            },
        ),
        case(
            "convex_upsample",
            vec![uniform(&[2, 2, 3], -1.0, 1.0, r), uniform(&[576, 2, 3], -2.0, 2.0, r)],
            |t, v| {
                let y = t.convex_upsample(v[0], v[1])?;
                project(t, y, 19)
            },
        ),
        case("l1", vec![away_from_zero(&[3, 4], r)], |t, v| t.l1_loss(v[0], &Tensor::zeros([3, 4]))),
    ]
}

/// Names of the per-op checks, in run order.
pub fn op_names() -> Vec<&'static str> {
    op_cases(0).iter().map(|c| c.name).collect()
}

/// Run the per-op finite-difference checks. `corrupt` names an op whose
/// backward rule is deliberately broken for the run.
pub fn op_checks(seed: u64, corrupt: Option<&'static str>) -> Result<Vec<CheckResult>> {
    let opts = GradCheckOptions {
        tol: OP_TOL,
        seed,
        ..GradCheckOptions::default()
    };
    op_cases(seed)
        .into_iter()
        .map(|c| {
            let f = &c.f;
            let report = grad_check(
                |t, v| {
                    if let Some(op) = corrupt {
                        t.corrupt_backward(op);
                    }
                    f(t, v)
                },
                &c.inputs,
                &opts,
            )?;
            Ok(CheckResult {
                name: c.name.to_string(),
                max_rel_err: report.max_rel_err,
                tol: OP_TOL,
                checked: report.checked,
                passed: report.passed,
            })
        })
        .collect()
}

/// Target offset of magnitude in [0.02, 0.05]. The untrained network predicts
/// flows within about 1e-3 of the identity, so every L1 residual stays far
/// from the kink at zero while parameters are perturbed.
fn off_kink(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(0.02..0.05);
    if rng.gen() { m } else { -m }
}

/// Finite-difference check of the whole network plus the multi-task loss on
/// a batch of random images with random targets near the identity flow.
/// `fraction` of each parameter tensor is probed.
pub fn end_to_end_check(
    config: &BookNetConfig,
    batch: usize,
    fraction: f64,
    seed: u64,
    corrupt: Option<&'static str>,
) -> Result<CheckResult> {
    let (net, store) = BookNet::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = (config.height, config.width);
    let samples: Vec<(Tensor, FlowTargets)> = (0..batch)
        .map(|_| {
            let image = uniform(&[3, h, w], 0.0, 1.0, &mut rng);
            let full = WarpFlow::from_fn(h, w, |_, _, u, v| (u + off_kink(&mut rng), v + off_kink(&mut rng)));
            (image, FlowTargets::from_full(&full).expect("even width"))
        })
        .collect();
    // Zero-initialized biases put relu inputs exactly at 0 wherever a window
    // sees only dead activations; a small jitter moves the check point off
    // those kinks. Flow-head biases stay put so predictions remain near the
    // identity.
    let inputs: Vec<Tensor> = store
        .iter()
        .map(|(name, t)| {
            let mut t = t.clone();
            if name.ends_with(".b") && !name.contains(".flow.") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1e-3..1e-3));
            }
            t
        })
        .collect();
    let opts = GradCheckOptions {
        tol: END_TO_END_TOL,
        fraction,
        seed,
        abs_floor: 1e-6,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        |t, vars| {
            if let Some(op) = corrupt {
                t.corrupt_backward(op);
            }
            let p = Bound::from_vars(vars.to_vec());
            let mut total: Option<Var> = None;
            for (image, gt) in &samples {
                let flows = net.forward(t, &p, image)?;
                let l = multitask_l1(t, &flows, gt, Supervision::ALL)?.total;
                total = Some(match total {
                    Some(acc) => t.add(acc, l)?,
                    None => l,
                });
            }
            Ok(total.expect("batch of at least one"))
        },
        &inputs,
        &opts,
    )?;
    Ok(CheckResult {
        name: format!("booknet+loss {batch}×{h}×{w}"),
        max_rel_err: report.max_rel_err,
        tol: END_TO_END_TOL,
        checked: report.checked,
        passed: report.passed,
    })
}

/// Per-op checks followed by the end-to-end check at the tiny configuration
/// with a batch of two 32×32 images.
pub fn run_suite(seed: u64, fraction: f64, corrupt: Option<&'static str>) -> Result<SuiteReport> {
    let mut checks = op_checks(seed, corrupt)?;
    checks.push(end_to_end_check(&BookNetConfig::tiny(), 2, fraction, seed, corrupt)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport { checks, passed })
}
