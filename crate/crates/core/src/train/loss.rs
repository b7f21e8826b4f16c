use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::WarpFlow;
use crate::model::FlowVars;
use crate::tensor::Tensor;

/// Which of the three flows contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Supervision {
    pub left: bool,
    pub right: bool,
    pub full: bool,
}

impl Supervision {
    pub const ALL: Supervision = Supervision {
        left: true,
        right: true,
        full: true,
    };

    pub fn any(&self) -> bool {
        self.left || self.right || self.full
    }
}

impl Default for Supervision {
    fn default() -> Self {
        Self::ALL
    }
}

/// Parses comma-separated subsets of `l`, `r`, `f` (e.g. `l,r,f` or `f`).
impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Supervision {
            left: false,
            right: false,
            full: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "l" | "left" => out.left = true,
                "r" | "right" => out.right = true,
                "f" | "full" => out.full = true,
                other => return Err(Error::Config(format!("unknown supervision target {other:?}"))),
            }
        }
        if !out.any() {
            return Err(Error::Config("at least one supervised flow is required".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.left, "l"), (self.right, "r"), (self.full, "f")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Ground-truth flows as `[H, W/2, 2]`, `[H, W/2, 2]` and `[H, W, 2]` tensors.
#[derive(Clone, Debug)]
pub struct FlowTargets {
    pub left: Tensor,
    pub right: Tensor,
    pub full: Tensor,
}

impl FlowTargets {
    pub fn from_flows(left: &WarpFlow, right: &WarpFlow, full: &WarpFlow) -> Self {
        FlowTargets {
            left: left.to_tensor(),
            right: right.to_tensor(),
            full: full.to_tensor(),
        }
    }

    /// Targets from a full flow, with the pages as its column halves.
    pub fn from_full(full: &WarpFlow) -> Result<Self> {
        let (l, r) = full.split_pages()?;
        Ok(Self::from_flows(&l, &r, full))
    }
}

/// Loss variables; unsupervised terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub left: Option<Var>,
    pub right: Option<Var>,
    pub full: Option<Var>,
}

/// Sum of per-flow mean absolute coordinate errors over the enabled flows.
pub fn multitask_l1(t: &mut Tape, pred: &FlowVars, gt: &FlowTargets, sup: Supervision) -> Result<LossVars> {
    if !sup.any() {
        return Err(Error::Config("multitask loss with every flow disabled".into()));
    }
    let left = sup.left.then(|| t.l1_loss(pred.left, &gt.left)).transpose()?;
    let right = sup.right.then(|| t.l1_loss(pred.right, &gt.right)).transpose()?;
    let full = sup.full.then(|| t.l1_loss(pred.full, &gt.full)).transpose()?;
    let mut terms = [left, right, full].into_iter().flatten();
    let mut total = terms.next().expect("at least one term");
    for term in terms {
        total = t.add(total, term)?;
    }
    Ok(LossVars {
        total,
        left,
        right,
        full,
    })
}

/// Mean absolute coordinate difference between two flows of equal extents.
pub fn flow_l1(pred: &WarpFlow, gt: &WarpFlow) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::dim(format!(
            "flow {}×{} vs {}×{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let n = pred.coords().len() as f64;
    Ok(pred.coords().iter().zip(gt.coords()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}
