//! Central finite-difference checking of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step relative to `max(|x|, 1)`.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor: errors are `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Fraction of entries of each input to probe; at least one is always probed.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-7,
            fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst entry as `(input index, flat element index)`.
    pub worst: Option<(usize, usize)>,
    pub per_input_max: Vec<f64>,
    pub checked: usize,
    pub passed: bool,
}

/// Compare tape gradients of the scalar `f(inputs)` against central differences.
///
/// `f` must build its graph on the given tape from the given leaf variables and
/// be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value ({})", tape.op_name(out))));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        per_input_max: vec![0.0; inputs.len()],
        checked: 0,
        passed: true,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let zeros;
        let analytic = match grads.get(vars[i]) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        let count = ((n as f64 * opts.fraction).ceil() as usize).clamp(1, n);
        let mut indices = sample(&mut rng, n, count).into_vec();
        indices.sort_unstable();
        for j in indices {
            let x = input.data()[j];
            let h = opts.eps * x.abs().max(1.0);
            probe[i].data_mut()[j] = x + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.checked += 1;
            if err > report.per_input_max[i] {
                report.per_input_max[i] = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_has_gradient_2x() {
        let x = Tensor::new([4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(v).unwrap(), expected.as_slice());

        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(7.0))),
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            t.corrupt_backward("mul");
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let report = grad_check(f, &[x], &GradCheckOptions::default()).unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_err - 1.0 / 3.0).abs() < 1e-6);
    }
}
