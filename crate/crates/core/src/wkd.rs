//! Gaussian moment estimation and the Wasserstein-distance distillation loss.
//!
//! Feature maps are flattened to an l×d matrix (channels × positions),
//! summarized by per-channel mean and standard deviation, and compared with
//! `gamma * ||mu_t - mu_s||^2 + ||delta_t - delta_s||^2`. With unit gamma
//! this equals the squared 2-Wasserstein distance between the two diagonal
//! Gaussians.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Keeps d(sqrt)/dx finite when a channel has zero variance.
pub const VAR_EPS: f32 = 1e-12;

/// Per-channel mean and standard deviation (diagonal covariance only).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    /// l×1 mean vector.
    pub mu: Tensor,
    /// l×1 standard deviation vector, elementwise >= 0.
    pub delta: Tensor,
}

impl GaussianMoments {
    pub fn channels(&self) -> usize {
        self.mu.shape()[0]
    }
}

/// Transpose token-major P (T×E) into a channel-major feature matrix (E×T).
/// `layout` declares the spatial arrangement; T must equal h·w.
pub fn tokens_to_feature_matrix(p: &Tensor, layout: (usize, usize)) -> Result<Tensor> {
    let shape = p.shape();
    if shape.len() != 2 || shape[0] != layout.0 * layout.1 {
        return Err(Error::Shape {
            op: "tokens_to_feature_matrix",
            lhs: shape.to_vec(),
            rhs: vec![layout.0 * layout.1, shape.get(1).copied().unwrap_or(0)],
        });
    }
    p.transpose()
}

/// Population moments of an l×d feature matrix: mu = (1/d) sum_i f_i,
/// delta_c = sqrt((1/d) sum_i (F[c][i] - mu_c)^2).
pub fn estimate_moments(f: &Tensor) -> Result<GaussianMoments> {
    let shape = f.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "estimate_moments",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (l, d) = (shape[0], shape[1]);
    let mut mu = Vec::with_capacity(l);
    let mut delta = Vec::with_capacity(l);
    for c in 0..l {
        let row = &f.data()[c * d..(c + 1) * d];
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        mu.push(mean as f32);
        delta.push(var.sqrt() as f32);
    }
    Ok(GaussianMoments {
        mu: Tensor::new(vec![l, 1], mu)?,
        delta: Tensor::new(vec![l, 1], delta)?,
    })
}

/// Differentiable moment estimation for the student path.
/// Returns (mu, delta) as l×1 vars; delta uses sqrt(var + eps).
pub fn moments_on_tape(tape: &Tape, f: Var) -> Result<(Var, Var)> {
    let shape = tape.value(f).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "moments_on_tape",
            lhs: shape,
            rhs: vec![],
        });
    }
    let d = shape[1];
    let avg_cols = tape.constant(Tensor::full(vec![d, 1], 1.0 / d as f32));
    let ones_row = tape.constant(Tensor::full(vec![1, d], 1.0));
    let mu = tape.matmul(f, avg_cols)?;
    let mu_bcast = tape.matmul(mu, ones_row)?;
    let diff = tape.sub(f, mu_bcast)?;
    let sq = tape.square(diff);
    let var = tape.matmul(sq, avg_cols)?;
    let var = tape.add_scalar(var, VAR_EPS);
    let delta = tape.sqrt(var);
    Ok((mu, delta))
}

/// gamma * ||mu_t - mu_s||^2 + ||delta_t - delta_s||^2, as a plain value.
pub fn wkd_loss(teacher: &GaussianMoments, student: &GaussianMoments, gamma: f32) -> Result<f32> {
    if teacher.channels() != student.channels() {
        return Err(Error::Shape {
            op: "wkd_loss",
            lhs: teacher.mu.shape().to_vec(),
            rhs: student.mu.shape().to_vec(),
        });
    }
    if gamma < 0.0 {
        return Err(Error::contract(format!("wkd_loss: gamma {gamma} must be >= 0")));
    }
    let mut mean_term = 0.0f64;
    let mut cov_term = 0.0f64;
    for c in 0..teacher.channels() {
        mean_term += (teacher.mu.data()[c] as f64 - student.mu.data()[c] as f64).powi(2);
        cov_term += (teacher.delta.data()[c] as f64 - student.delta.data()[c] as f64).powi(2);
    }
    Ok((gamma as f64 * mean_term + cov_term) as f32)
}

/// Differentiable form with the teacher held constant; gradients flow only
/// through the student moments.
pub fn wkd_loss_on_tape(
    tape: &Tape,
    teacher: &GaussianMoments,
    student_mu: Var,
    student_delta: Var,
    gamma: f32,
) -> Result<Var> {
    let s_shape = tape.value(student_mu).shape().to_vec();
    if s_shape != teacher.mu.shape() {
        return Err(Error::Shape {
            op: "wkd_loss",
            lhs: teacher.mu.shape().to_vec(),
            rhs: s_shape,
        });
    }
    if gamma < 0.0 {
        return Err(Error::contract(format!("wkd_loss: gamma {gamma} must be >= 0")));
    }
    let mu_t = tape.constant(teacher.mu.clone());
    let delta_t = tape.constant(teacher.delta.clone());
    let dmu = tape.sub(mu_t, student_mu)?;
    let mean_term = tape.sum(tape.square(dmu));
    let ddelta = tape.sub(delta_t, student_delta)?;
    let cov_term = tape.sum(tape.square(ddelta));
    tape.add(tape.scale(mean_term, gamma), cov_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_matrix_is_transpose() {
        let p = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 3.0],
            vec![4.0, 5.0],
        ])
        .unwrap();
        let f = tokens_to_feature_matrix(&p, (2, 2)).unwrap();
        assert_eq!(f.shape(), &[2, 4]);
        assert_eq!(f.data(), &[1.0, 0.0, 2.0, 4.0, 0.0, 1.0, 3.0, 5.0]);
        // Round trip back to token layout.
        assert_eq!(f.transpose().unwrap(), p);
    }

    #[test]
    fn feature_matrix_layout_error() {
        let p = Tensor::zeros(vec![4, 2]);
        assert!(tokens_to_feature_matrix(&p, (3, 2)).is_err());
    }

    #[test]
    fn moments_single_column() {
        let f = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let m = estimate_moments(&f).unwrap();
        assert_eq!(m.mu.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(m.delta.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn moments_hand_computed() {
        // Columns [1, 3] in one channel: mu = 2, population var = 1.
        let f = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let m = estimate_moments(&f).unwrap();
        assert_eq!(m.mu.data(), &[2.0]);
        assert_eq!(m.delta.data(), &[1.0]);
    }

    #[test]
    fn moments_constant_matrix() {
        let f = Tensor::full(vec![2, 5], 3.25);
        let m = estimate_moments(&f).unwrap();
        assert_eq!(m.mu.data(), &[3.25, 3.25]);
        assert_eq!(m.delta.data(), &[0.0, 0.0]);
    }

    #[test]
    fn wkd_identity_is_zero() {
        let f = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let m = estimate_moments(&f).unwrap();
        assert_eq!(wkd_loss(&m, &m, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn wkd_hand_value() {
        let t = GaussianMoments {
            mu: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
            delta: Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap(),
        };
        let s = GaussianMoments {
            mu: Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap(),
            delta: t.delta.clone(),
        };
        assert_eq!(wkd_loss(&t, &s, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn wkd_gamma_zero_isolates_cov_term() {
        let t = GaussianMoments {
            mu: Tensor::new(vec![2, 1], vec![5.0, -3.0]).unwrap(),
            delta: Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
        };
        let s = GaussianMoments {
            mu: Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap(),
            delta: Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap(),
        };
        let expect = (1.0f32 - 0.0).powi(2) + (2.0f32 - 1.0).powi(2);
        assert_eq!(wkd_loss(&t, &s, 0.0).unwrap(), expect);
    }

    #[test]
    fn wkd_symmetric_as_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let rand_m = |rng: &mut ChaCha8Rng| GaussianMoments {
                mu: Tensor::new(vec![4, 1], (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .unwrap(),
                delta: Tensor::new(vec![4, 1], (0..4).map(|_| rng.gen_range(0.0..2.0)).collect())
                    .unwrap(),
            };
            let a = rand_m(&mut rng);
            let b = rand_m(&mut rng);
            let ab = wkd_loss(&a, &b, 1.7).unwrap();
            let ba = wkd_loss(&b, &a, 1.7).unwrap();
            assert!((ab - ba).abs() < 1e-6 * ab.abs().max(1.0));
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn gradient_through_moments_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let teacher = GaussianMoments {
            mu: Tensor::new(vec![3, 1], vec![0.5, -0.2, 1.0]).unwrap(),
            delta: Tensor::new(vec![3, 1], vec![0.8, 0.3, 1.5]).unwrap(),
        };
        for _ in 0..5 {
            let data: Vec<f32> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = Tensor::new(vec![3, 4], data).unwrap();
            let t = teacher.clone();
            let err = finite_diff_check(
                move |tape, v| {
                    let (mu, delta) = moments_on_tape(tape, v)?;
                    wkd_loss_on_tape(tape, &t, mu, delta, 2.0)
                },
                &f,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "err = {err}");
        }
    }

    #[test]
    fn translation_shifts_only_the_mean_term() {
        let f = Tensor::new(vec![2, 3], vec![0.1, 0.4, -0.3, 1.0, 1.2, 0.8]).unwrap();
        let teacher = estimate_moments(&Tensor::new(
            vec![2, 3],
            vec![0.0, 0.5, 0.2, 0.9, 1.4, 1.1],
        )
        .unwrap())
        .unwrap();
        let gamma = 2.0f32;
        let base_s = estimate_moments(&f).unwrap();
        let c = [0.3f32, -0.7];
        let mut shifted = f.clone();
        for col in 0..3 {
            for ch in 0..2 {
                shifted.data_mut()[ch * 3 + col] += c[ch];
            }
        }
        let shift_s = estimate_moments(&shifted).unwrap();
        let before = wkd_loss(&teacher, &base_s, gamma).unwrap();
        let after = wkd_loss(&teacher, &shift_s, gamma).unwrap();
        // Only the mean term moves; delta is translation-invariant.
        let mut mean_before = 0.0f64;
        let mut mean_after = 0.0f64;
        for ch in 0..2 {
            let d = teacher.mu.data()[ch] as f64 - base_s.mu.data()[ch] as f64;
            mean_before += d * d;
            let d2 = d - c[ch] as f64;
            mean_after += d2 * d2;
        }
        let expect = gamma as f64 * (mean_after - mean_before);
        assert!(((after - before) as f64 - expect).abs() < 1e-5);
    }
}
