//! Reference computations that the simulator is checked against. Each one
//! is computed independently of the library code paths it validates.

use nalgebra::{DMatrix, DVector};
use sdfeel::model::{Labels, ModelVector, SampleBatch};
use sdfeel::topology::MixingMatrix;

/// Ridge least squares via the normal equations, solved with nalgebra's
/// Cholesky: `(XᵀX/n + λI) w = Xᵀb/n`.
pub fn least_squares(data: &SampleBatch, lambda: f64) -> ModelVector {
    let n = data.len();
    let d = data.feature_dim();
    let x = DMatrix::from_fn(n, d, |i, j| data.row(i)[j]);
    let Labels::Real(b) = data.labels() else {
        panic!("least squares needs real labels")
    };
    let b = DVector::from_column_slice(b);
    let gram = x.transpose() * &x / n as f64 + DMatrix::identity(d, d) * lambda;
    let rhs = x.transpose() * b / n as f64;
    let w = gram.cholesky().expect("Gram matrix is positive definite").solve(&rhs);
    ModelVector::from_vec(w.iter().copied().collect())
}

/// Second-largest eigenvalue modulus from nalgebra's dense symmetric
/// eigensolver.
pub fn second_eigenvalue_modulus(p: &MixingMatrix) -> f64 {
    let n = p.dim();
    if n < 2 {
        return 0.0;
    }
    let dense = DMatrix::from_fn(n, n, |i, j| p.get(i, j));
    let mut moduli: Vec<f64> = dense.symmetric_eigen().eigenvalues.iter().map(|v| v.abs()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    moduli[1]
}

/// Replay a timeline where cluster `c` completes at every positive multiple
/// of `periods[c]` (integer time), ties going to the lower index. After each
/// completion the completing cluster's staleness is reset; returns the
/// largest staleness seen across clusters up to `horizon`.
pub fn brute_force_max_staleness(periods: &[u64], horizon: u64) -> u64 {
    let mut last = vec![0u64; periods.len()];
    let mut k = 0u64;
    let mut worst = 0;
    for t in 1..=horizon {
        for (c, &p) in periods.iter().enumerate() {
            if t % p == 0 {
                k += 1;
                last[c] = k;
                worst = last.iter().map(|&l| k - l).max().unwrap_or(0).max(worst);
            }
        }
    }
    worst
}

/// `‖Y − ȳ1ᵀ‖_F` with the plain average `ȳ`.
pub fn disagreement(models: &[ModelVector]) -> f64 {
    let n = models.len() as f64;
    let dim = models[0].len();
    let mut mean = vec![0.0; dim];
    for m in models {
        for (acc, v) in mean.iter_mut().zip(m.as_slice()) {
            *acc += v / n;
        }
    }
    models
        .iter()
        .flat_map(|m| m.as_slice().iter().zip(&mean).map(|(v, c)| (v - c) * (v - c)))
        .sum::<f64>()
        .sqrt()
}
