//! LU decomposition with partial pivoting, used for the forward-only inverse
//! and the gradient-free teacher linear systems.

use super::Tensor;
use crate::error::{Error, Result};

/// Solve `A X = B` for a square `n x n` matrix `a` and an `n x cols`
/// right-hand side, entirely in f64. Singularity is reported with a cheap
/// condition estimate (ratio of largest to smallest pivot magnitude).
pub fn solve_f64(a: &[f64], n: usize, rhs: &[f64], cols: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(rhs.len(), n * cols);
    let mut lu: Vec<f64> = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    let mut max_pivot = 0.0f64;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu[col * n + col].abs();
        for row in col + 1..n {
            let v = lu[row * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        max_pivot = max_pivot.max(pivot_val);
        if pivot_val < 1e-12 * max_pivot.max(1.0) {
            let cond = if pivot_val == 0.0 {
                f64::INFINITY
            } else {
                max_pivot / pivot_val
            };
            return Err(Error::Singular { op: "inverse", cond });
        }
        if pivot_row != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot_row * n + j);
            }
            perm.swap(col, pivot_row);
        }
        let piv = lu[col * n + col];
        for row in col + 1..n {
            let factor = lu[row * n + col] / piv;
            lu[row * n + col] = factor;
            for j in col + 1..n {
                lu[row * n + j] -= factor * lu[col * n + j];
            }
        }
    }

    // Forward/back substitution per right-hand-side column.
    let mut out = vec![0.0f64; n * cols];
    let mut y = vec![0.0f64; n];
    let mut x = vec![0.0f64; n];
    for rhs_col in 0..cols {
        for i in 0..n {
            let mut acc = rhs[perm[i] * cols + rhs_col];
            for j in 0..i {
                acc -= lu[i * n + j] * y[j];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc -= lu[i * n + j] * x[j];
            }
            x[i] = acc / lu[i * n + i];
            out[i * cols + rhs_col] = x[i];
        }
    }
    Ok(out)
}

/// Invert a square matrix.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "inverse",
            lhs: shape.to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let n = shape[0];
    let a64: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let mut eye = vec![0.0f64; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let x = solve_f64(&a64, n, &eye, n)?;
    Tensor::new(vec![n, n], x.into_iter().map(|v| v as f32).collect())
}
