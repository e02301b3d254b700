//! Central-difference gradient checking.
//!
//! The checker replays a scalar-valued tape builder with each input
//! coordinate nudged by ±ε and compares the quotient against the analytic
//! gradient from the reverse sweep. Meant to run in f64.

use crate::error::Result;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub failing_coords: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing_coords == 0
    }
}

/// Compare analytic and numeric gradients of `build` w.r.t. every
/// coordinate of every tensor in `inputs`.
///
/// `build` must produce a scalar node and be a pure function of the input
/// values. Relative error uses max(1, |analytic|, |numeric|) as the
/// denominator. `skip` can veto coordinates that sit on a kink
/// (e.g. near-tied pool windows).
pub fn grad_check_filtered<F, S>(
    build: F,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
    corrupt_op: Option<&str>,
    skip: S,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
    S: Fn(usize, usize) -> bool,
{
    // analytic pass
    let mut tape = Tape::new();
    if let Some(op) = corrupt_op {
        tape.set_backward_corruption(op);
    }
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get(id, t.shape()))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).scalar_value())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        failing_coords: 0,
        tolerance,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            if skip(i, j) {
                continue;
            }
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - epsilon;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
            if rel > tolerance {
                report.failing_coords += 1;
            }
        }
    }
    Ok(report)
}

pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    grad_check_filtered(build, inputs, epsilon, tolerance, None, |_, _| false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::BinaryKind;

    #[test]
    fn linear_function_is_exact() {
        // loss = sum(3·x): analytic and central difference agree to
        // machine precision for linear maps.
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(
            |tape, ids| {
                let three = tape.leaf(Tensor::full(&[4], 3.0));
                let prod = tape.binary(BinaryKind::Mul, ids[0], three)?;
                Ok(tape.sum(prod))
            },
            &[x],
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mul_gradient_matches_difference() {
        // d(a·b)/da at a=3, b=5 is 5
        let a = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![5.0]).unwrap();
        let report = grad_check(
            |tape, ids| {
                let p = tape.mul(ids[0], ids[1])?;
                Ok(tape.sum(p))
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let report = grad_check(
            |tape, ids| {
                let s = tape.sigmoid(ids[0]);
                Ok(tape.sum(s))
            },
            &[x.clone()],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed());
        // σ'(0) = 0.25 exactly
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let s = tape.sigmoid(id);
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(id, &[1]).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn composite_sigmoid_of_dense() {
        // loss = sigmoid(w·x), gradient w.r.t. w
        let w = Tensor::from_vec(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, -0.5]).unwrap();
        let report = grad_check(
            move |tape, ids| {
                let xid = tape.leaf(x.clone());
                let y = tape.dense(xid, ids[0], None)?;
                let s = tape.sigmoid(y);
                Ok(tape.sum(s))
            },
            &[w],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check_filtered(
            |tape, ids| {
                let s = tape.sigmoid(ids[0]);
                Ok(tape.sum(s))
            },
            &[x],
            1e-5,
            1e-6,
            Some("sigmoid"),
            |_, _| false,
        )
        .unwrap();
        assert!(!report.passed(), "corruption must be reported");
    }
}
