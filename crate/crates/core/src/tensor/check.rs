//! Central-difference gradient verification harness.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar loss from a single grad-enabled input on the given
/// tape. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::contract(format!(
            "finite_diff_check: eps {eps} outside [1e-5, 1e-2]"
        )));
    }

    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&tape, xv)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract("finite_diff_check: f must return a scalar"));
    }
    if !tape.value(loss).is_finite() {
        return Err(Error::Numeric("finite_diff_check: non-finite loss".into()));
    }

    // The numeric side replays the same recorded graph at f64 precision so
    // the central difference is not drowned by f32 rounding.
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut numeric = vec![0.0f64; x.numel()];
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus[i] += eps as f64;
        let mut minus = base.clone();
        minus[i] -= eps as f64;
        let up = tape.eval_f64(loss, &[(xv, plus)])?;
        let down = tape.eval_f64(loss, &[(xv, minus)])?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(
                "finite_diff_check: non-finite perturbed loss".into(),
            ));
        }
        numeric[i] = (up - down) / (2.0 * eps as f64);
    }

    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut max_rel = 0.0f32;
    for i in 0..x.numel() {
        let a = analytic.data()[i];
        let rel = (a as f64 - numeric[i]).abs() as f32 / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.square(v);
                Ok(t.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn linear_is_exact_up_to_rounding() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-3).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 0.5).is_err());
    }
}
