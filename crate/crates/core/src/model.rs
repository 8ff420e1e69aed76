//! Parameter vectors, sample batches and the two desk-scale learning tasks.
//!
//! The quadratic task is ridge least squares,
//! `F(w) = 1/(2n) Σ (xᵀw − b)² + λ/2 ‖w‖²`, whose optimum is available in
//! closed form. The logistic task is multinomial softmax cross-entropy with a
//! per-class bias and optional L2 penalty on every parameter.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Dense model parameters. All aggregation in the protocol happens on these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ModelVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.len(),
            });
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ModelVector {
        ModelVector(self.0.iter().map(|a| a * alpha).collect())
    }

    pub fn sub(&self, other: &ModelVector) -> ModelVector {
        debug_assert_eq!(self.len(), other.len());
        ModelVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &ModelVector) -> ModelVector {
        debug_assert_eq!(self.len(), other.len());
        ModelVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn dot(&self, other: &ModelVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(&self, other: &ModelVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Weighted sum `Σ wᵢ vᵢ`; all vectors must share a dimension.
    pub fn weighted_sum<'a>(dim: usize, terms: impl IntoIterator<Item = (f64, &'a ModelVector)>) -> ModelVector {
        let mut out = ModelVector::zeros(dim);
        for (w, v) in terms {
            out.axpy(w, v);
        }
        out
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ModelVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Regression targets for the quadratic task.
    Real(Vec<f64>),
    /// Class indices for the logistic task.
    Class(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major feature matrix plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    features: Vec<f64>,
    feature_dim: usize,
    labels: Labels,
}

impl SampleBatch {
    pub fn new(features: Vec<f64>, feature_dim: usize, labels: Labels) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Validation("feature_dim must be positive".into()));
        }
        if features.len() != feature_dim * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: feature_dim * labels.len(),
                actual: features.len(),
            });
        }
        Ok(SampleBatch {
            features,
            feature_dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Real(v) => Labels::Real(indices.iter().map(|&i| v[i]).collect()),
            Labels::Class(v) => Labels::Class(indices.iter().map(|&i| v[i]).collect()),
        };
        SampleBatch {
            features,
            feature_dim: self.feature_dim,
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub feature_dim: usize,
    /// Only meaningful for the logistic task.
    pub num_classes: usize,
    pub regularization: f64,
}

impl TaskSpec {
    pub fn quadratic(feature_dim: usize, regularization: f64) -> Self {
        TaskSpec {
            kind: TaskKind::Quadratic,
            feature_dim,
            num_classes: 1,
            regularization,
        }
    }

    pub fn logistic(feature_dim: usize, num_classes: usize, regularization: f64) -> Self {
        TaskSpec {
            kind: TaskKind::Logistic,
            feature_dim,
            num_classes,
            regularization,
        }
    }

    /// Model dimension M.
    pub fn param_count(&self) -> usize {
        match self.kind {
            TaskKind::Quadratic => self.feature_dim,
            TaskKind::Logistic => self.num_classes * (self.feature_dim + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("task.feature_dim", "must be positive"));
        }
        if self.kind == TaskKind::Logistic && self.num_classes < 2 {
            return Err(Error::config(
                "task.num_classes",
                "logistic task needs at least 2 classes",
            ));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(Error::config("task.regularization", "must be finite and nonnegative"));
        }
        Ok(())
    }

    fn check(&self, model: &ModelVector, data: &SampleBatch) -> Result<()> {
        model.check_dim(self.param_count())?;
        if data.feature_dim() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: data.feature_dim(),
            });
        }
        if data.is_empty() {
            return Err(Error::Validation("empty sample batch".into()));
        }
        match (self.kind, data.labels()) {
            (TaskKind::Quadratic, Labels::Real(_)) => Ok(()),
            (TaskKind::Logistic, Labels::Class(c)) => {
                if c.iter().any(|&l| l >= self.num_classes) {
                    Err(Error::Validation("class label out of range".into()))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::Validation("label kind does not match task".into())),
        }
    }
}

/// Mean per-sample loss over `data`, including the L2 term.
pub fn evaluate_loss(task: &TaskSpec, model: &ModelVector, data: &SampleBatch) -> Result<f64> {
    task.check(model, data)?;
    let n = data.len() as f64;
    let w = model.as_slice();
    let data_loss = match data.labels() {
        Labels::Real(b) => {
            let mut acc = 0.0;
            for (i, &bi) in b.iter().enumerate() {
                let r = dot(data.row(i), w) - bi;
                acc += r * r;
            }
            acc / (2.0 * n)
        }
        Labels::Class(y) => {
            let mut logits = vec![0.0; task.num_classes];
            let mut acc = 0.0;
            for (i, &yi) in y.iter().enumerate() {
                compute_logits(task, w, data.row(i), &mut logits);
                acc += log_sum_exp(&logits) - logits[yi];
            }
            acc / n
        }
    };
    Ok(data_loss + 0.5 * task.regularization * model.norm_sq())
}

/// Mean gradient of the per-sample loss over `data`.
pub fn evaluate_gradient(task: &TaskSpec, model: &ModelVector, data: &SampleBatch) -> Result<ModelVector> {
    task.check(model, data)?;
    let n = data.len() as f64;
    let w = model.as_slice();
    let d = task.feature_dim;
    let mut grad = vec![0.0; task.param_count()];
    match data.labels() {
        Labels::Real(b) => {
            for (i, &bi) in b.iter().enumerate() {
                let x = data.row(i);
                let r = dot(x, w) - bi;
                for (g, xj) in grad.iter_mut().zip(x) {
                    *g += r * xj;
                }
            }
        }
        Labels::Class(y) => {
            let mut logits = vec![0.0; task.num_classes];
            for (i, &yi) in y.iter().enumerate() {
                let x = data.row(i);
                compute_logits(task, w, x, &mut logits);
                let lse = log_sum_exp(&logits);
                for (c, &z) in logits.iter().enumerate() {
                    let mut coeff = (z - lse).exp();
                    if c == yi {
                        coeff -= 1.0;
                    }
                    let block = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                    for (g, xj) in block[..d].iter_mut().zip(x) {
                        *g += coeff * xj;
                    }
                    block[d] += coeff;
                }
            }
        }
    }
    let lambda = task.regularization;
    for (g, wi) in grad.iter_mut().zip(w) {
        *g = *g / n + lambda * wi;
    }
    Ok(ModelVector(grad))
}

/// Fraction of samples whose arg-max logit matches the label. Logistic only.
pub fn evaluate_accuracy(task: &TaskSpec, model: &ModelVector, data: &SampleBatch) -> Result<f64> {
    task.check(model, data)?;
    let Labels::Class(y) = data.labels() else {
        return Err(Error::Validation("accuracy needs class labels".into()));
    };
    let mut logits = vec![0.0; task.num_classes];
    let mut correct = 0usize;
    for (i, &yi) in y.iter().enumerate() {
        compute_logits(task, model.as_slice(), data.row(i), &mut logits);
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        if pred == yi {
            correct += 1;
        }
    }
    Ok(correct as f64 / y.len() as f64)
}

/// Maximum per-coordinate deviation between the analytic gradient and
/// central differences with step `step`. Each deviation is
/// `|g − g_fd| / max(1, |g|, |g_fd|)`, i.e. relative for large
/// coordinates and absolute for small ones.
pub fn finite_difference_check(task: &TaskSpec, model: &ModelVector, data: &SampleBatch, step: f64) -> Result<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Validation("finite-difference step must be positive".into()));
    }
    let grad = evaluate_gradient(task, model, data)?;
    let mut probe = model.clone();
    let mut worst = 0.0_f64;
    for j in 0..model.len() {
        let orig = probe[j];
        probe[j] = orig + step;
        let plus = evaluate_loss(task, &probe, data)?;
        probe[j] = orig - step;
        let minus = evaluate_loss(task, &probe, data)?;
        probe[j] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let dev = (grad[j] - fd).abs() / 1.0_f64.max(grad[j].abs()).max(fd.abs());
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Upper bound on the smoothness constant of the loss over `data`.
///
/// Quadratic: exact, `λ_max(XᵀX/n) + λ`. Logistic: the softmax Hessian with
/// respect to the logits has spectral norm at most 1/2, giving
/// `λ_max(X̃ᵀX̃/n)/2 + λ` with `X̃` the bias-augmented features.
pub fn smoothness_bound(task: &TaskSpec, data: &SampleBatch) -> Result<f64> {
    let d = task.feature_dim;
    let aug = match task.kind {
        TaskKind::Quadratic => 0,
        TaskKind::Logistic => 1,
    };
    let n = d + aug;
    let mut gram = vec![0.0; n * n];
    let mut row = vec![1.0; n];
    for i in 0..data.len() {
        row[..d].copy_from_slice(data.row(i));
        for a in 0..n {
            for b in 0..n {
                gram[a * n + b] += row[a] * row[b];
            }
        }
    }
    let count = data.len() as f64;
    gram.iter_mut().for_each(|g| *g /= count);
    let top = linalg::symmetric_eigenvalues(&gram, n)[0];
    Ok(match task.kind {
        TaskKind::Quadratic => top + task.regularization,
        TaskKind::Logistic => 0.5 * top + task.regularization,
    })
}

/// Closed-form minimizer of the quadratic task over `data`:
/// `(XᵀX/n + λI) w = Xᵀb/n`.
pub fn quadratic_optimum(task: &TaskSpec, data: &SampleBatch) -> Result<ModelVector> {
    let Labels::Real(b) = data.labels() else {
        return Err(Error::Validation("quadratic optimum needs real labels".into()));
    };
    let d = task.feature_dim;
    let n = data.len() as f64;
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (i, &bi) in b.iter().enumerate() {
        let x = data.row(i);
        for a in 0..d {
            rhs[a] += x[a] * bi / n;
            for c in 0..d {
                gram[a * d + c] += x[a] * x[c] / n;
            }
        }
    }
    for a in 0..d {
        gram[a * d + a] += task.regularization;
    }
    linalg::cholesky_solve(&gram, &rhs, d).map(ModelVector)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn compute_logits(task: &TaskSpec, w: &[f64], x: &[f64], out: &mut [f64]) {
    let d = task.feature_dim;
    for (c, z) in out.iter_mut().enumerate() {
        let block = &w[c * (d + 1)..(c + 1) * (d + 1)];
        *z = dot(&block[..d], x) + block[d];
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_batch(b: Vec<f64>) -> SampleBatch {
        let d = b.len();
        let mut f = vec![0.0; d * d];
        for i in 0..d {
            f[i * d + i] = 1.0;
        }
        SampleBatch::new(f, d, Labels::Real(b)).unwrap()
    }

    #[test]
    fn quadratic_identity_zero_labels_zero_loss() {
        let task = TaskSpec::quadratic(3, 0.0);
        let data = identity_batch(vec![0.0; 3]);
        assert_eq!(evaluate_loss(&task, &ModelVector::zeros(3), &data).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_identity_gradient_is_negative_labels_over_n() {
        let task = TaskSpec::quadratic(3, 0.0);
        let b = vec![1.0, -2.0, 0.5];
        let data = identity_batch(b.clone());
        let g = evaluate_gradient(&task, &ModelVector::zeros(3), &data).unwrap();
        // Row i only touches coordinate i, so the mean gradient is -b/n.
        for i in 0..3 {
            assert_eq!(g[i], -b[i] / 3.0);
        }
    }

    #[test]
    fn quadratic_single_identity_row_gradient_is_negative_label() {
        let task = TaskSpec::quadratic(1, 0.0);
        let data = SampleBatch::new(vec![1.0], 1, Labels::Real(vec![4.0])).unwrap();
        let g = evaluate_gradient(&task, &ModelVector::zeros(1), &data).unwrap();
        assert_eq!(g.as_slice(), &[-4.0]);
    }

    #[test]
    fn logistic_zero_model_is_ln2() {
        let task = TaskSpec::logistic(2, 2, 0.0);
        let data = SampleBatch::new(vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0], 2, Labels::Class(vec![0, 1, 1])).unwrap();
        let loss = evaluate_loss(&task, &ModelVector::zeros(6), &data).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let task = TaskSpec::quadratic(3, 0.0);
        let data = identity_batch(vec![0.0; 3]);
        let err = evaluate_loss(&task, &ModelVector::zeros(2), &data).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, actual: 2 }));
    }

    #[test]
    fn constant_loss_task_has_zero_fd_deviation() {
        // All-zero features and labels: loss is identically zero.
        let task = TaskSpec::quadratic(2, 0.0);
        let data = SampleBatch::new(vec![0.0; 6], 2, Labels::Real(vec![0.0; 3])).unwrap();
        let dev = finite_difference_check(&task, &ModelVector::from_vec(vec![0.3, -1.2]), &data, 1e-5).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let task = TaskSpec::quadratic(1, 0.0);
        let data = SampleBatch::new(vec![1.0], 1, Labels::Real(vec![1.0])).unwrap();
        assert!(finite_difference_check(&task, &ModelVector::zeros(1), &data, 0.0).is_err());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let task = TaskSpec::logistic(1, 2, 0.0);
        // class 1 logit = x, class 0 logit = 0.
        let model = ModelVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]);
        let data = SampleBatch::new(vec![1.0, -1.0, 2.0], 1, Labels::Class(vec![1, 0, 0])).unwrap();
        assert!((evaluate_accuracy(&task, &model, &data).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn select_preserves_row_order() {
        let data = SampleBatch::new(vec![1.0, 2.0, 3.0], 1, Labels::Real(vec![10.0, 20.0, 30.0])).unwrap();
        let s = data.select(&[2, 0]);
        assert_eq!(s.row(0), &[3.0]);
        assert_eq!(s.labels(), &Labels::Real(vec![30.0, 10.0]));
    }
}
