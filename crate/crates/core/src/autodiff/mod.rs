//! Minimal reverse-mode automatic differentiation.
//!
//! Every operation executed through a [`Tape`] appends a node holding its
//! output value and, when any input needs a gradient, whatever it must keep
//! for the backward pass. [`Tape::backward`] replays the nodes in reverse
//! insertion order, which is a valid topological order since a node can only
//! refer to nodes created before it.
//!
//! Nodes whose inputs are all constants record no backward information, so
//! inference through a tape of constants keeps only forward values.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
pub mod params;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{AttentionVars, LAYER_NORM_EPS};
pub use params::{Bound, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddBias { x: Var, bias: Var, axis: usize },
    Relu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum { x: Var },
    Mean { x: Var },
    Conv2d { x: Var, w: Var, geom: kernels::ConvGeom },
    Attention { q: Var, k: Var, v: Var, scale: f64, probs: Vec<f64> },
    BilinearSample { src: Var, flow: Var },
    ConvexUpsample { coarse: Var, logits: Var, weights: Vec<f64> },
    L1 { pred: Var, target: Tensor },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Relu { .. } => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::Attention { .. } => "attention",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::ConvexUpsample { .. } => "convex_upsample",
            Op::L1 { .. } => "l1",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Record of executed operations.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    corrupt: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug hook: scale every gradient produced by the named op's backward
    /// rule by 1.5. Used to confirm that the gradient checker notices a broken rule.
    pub fn corrupt_backward(&mut self, op_name: &'static str) {
        self.corrupt = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Fails if any produced gradient is non-finite, naming the op whose
    /// backward rule produced it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(grad);
                continue;
            }
            let mut sink = GradSink {
                grads: &mut grads,
                nodes: &self.nodes,
                factor: if self.corrupt == Some(node.op.name()) {
                    1.5
                } else {
                    1.0
                },
                non_finite: false,
            };
            backward::apply(node, &grad, &mut sink);
            if sink.non_finite {
                return Err(Error::NonFinite(format!(
                    "gradient produced by {} (node {idx})",
                    node.op.name()
                )));
            }
            // keep intermediate grads only where someone may ask for them
            grads[idx] = None;
        }
        Ok(Gradients { grads })
    }

    /// Name of the op that produced `var`.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }
}

/// Accumulates gradients into input slots during a backward step.
pub(crate) struct GradSink<'a> {
    grads: &'a mut Vec<Option<Vec<f64>>>,
    nodes: &'a [Node],
    factor: f64,
    non_finite: bool,
}

impl<'a> GradSink<'a> {
    pub fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Accumulate a full-size gradient for `var`.
    pub fn add(&mut self, var: Var, g: Vec<f64>) {
        if !self.wants(var) {
            return;
        }
        let mut g = g;
        if self.factor != 1.0 {
            g.iter_mut().for_each(|v| *v *= self.factor);
        }
        if g.iter().any(|v| !v.is_finite()) {
            self.non_finite = true;
        }
        match &mut self.grads[var.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn value(&self, var: Var) -> &'a Tensor {
        &self.nodes[var.0].value
    }
}

/// Gradients of a scalar with respect to every trainable leaf reached.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` if the leaf was not reached.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}
