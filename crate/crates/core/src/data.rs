//! Synthetic datasets, non-IID client partitioning and data-size weights.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Labels, ModelVector, SampleBatch, TaskKind, TaskSpec};

const MAX_PARTITION_RETRIES: usize = 100;

/// Distance of class means from the origin for the logistic generator.
const CLASS_SEPARATION: f64 = 3.0;

/// Spread of per-group feature means for the quadratic generator. Gives the
/// groups different feature distributions so that a class-skewed partition
/// is also non-IID for least squares.
const GROUP_SHIFT: f64 = 1.0;

/// A global dataset together with the class of every sample. For the
/// quadratic task the "class" is the feature group a sample was drawn from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: SampleBatch,
    pub classes: Vec<usize>,
    pub num_classes: usize,
    /// Generating weights `w*` for quadratic data.
    pub ground_truth: Option<ModelVector>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    /// Indices into the global dataset, ascending.
    pub indices: Vec<usize>,
    pub samples: SampleBatch,
}

impl ClientShard {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

/// `m[i] = |S_i|/|S|`, `m_hat[i] = |S_i|/|S̃_d|` for the cluster `d` of
/// client `i`, and `m_tilde[d] = |S̃_d|/|S|`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataWeights {
    pub m: Vec<f64>,
    pub m_hat: Vec<f64>,
    pub m_tilde: Vec<f64>,
}

impl DataWeights {
    pub fn num_clusters(&self) -> usize {
        self.m_tilde.len()
    }

    /// Weights with uniform cluster shares, used by diagnostics that assume
    /// doubly stochastic mixing.
    pub fn is_uniform(&self, tol: f64) -> bool {
        let u = 1.0 / self.m_tilde.len() as f64;
        self.m_tilde.iter().all(|&w| (w - u).abs() <= tol)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

struct Generator {
    task: TaskSpec,
    num_classes: usize,
    noise: f64,
    means: Vec<Vec<f64>>,
    ground_truth: Option<ModelVector>,
    rng: ChaCha8Rng,
}

impl Generator {
    fn new(task: TaskSpec, num_classes: usize, noise: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let d = task.feature_dim;
        let ground_truth = match task.kind {
            TaskKind::Quadratic => Some(ModelVector::from_vec((0..d).map(|_| normal(&mut rng)).collect())),
            TaskKind::Logistic => None,
        };
        let means = (0..num_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                match task.kind {
                    TaskKind::Quadratic => raw.iter().map(|v| v * GROUP_SHIFT).collect(),
                    TaskKind::Logistic => {
                        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        raw.iter().map(|v| v * CLASS_SEPARATION / norm).collect()
                    }
                }
            })
            .collect();
        Generator {
            task,
            num_classes,
            noise,
            means,
            ground_truth,
            rng,
        }
    }

    fn draw(&mut self, num_samples: usize) -> Result<Dataset> {
        let d = self.task.feature_dim;
        let mut features = Vec::with_capacity(num_samples * d);
        let mut classes = Vec::with_capacity(num_samples);
        let mut targets = Vec::with_capacity(num_samples);
        for i in 0..num_samples {
            let c = i % self.num_classes;
            let start = features.len();
            for j in 0..d {
                let z = normal(&mut self.rng);
                let x = match self.task.kind {
                    TaskKind::Quadratic => self.means[c][j] + z,
                    TaskKind::Logistic => self.means[c][j] + self.noise * z,
                };
                features.push(x);
            }
            if let Some(w) = &self.ground_truth {
                let x = &features[start..];
                let clean: f64 = x.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
                let eps = normal(&mut self.rng);
                targets.push(clean + self.noise * eps);
            }
            classes.push(c);
        }
        let labels = match self.task.kind {
            TaskKind::Quadratic => Labels::Real(targets),
            TaskKind::Logistic => Labels::Class(classes.clone()),
        };
        Ok(Dataset {
            samples: SampleBatch::new(features, d, labels)?,
            classes,
            num_classes: self.num_classes,
            ground_truth: self.ground_truth.clone(),
        })
    }
}

fn check_synth_args(task: &TaskSpec, num_samples: usize, num_classes: usize, noise: f64) -> Result<()> {
    task.validate()?;
    if num_classes == 0 {
        return Err(Error::config("data.num_classes", "must be positive"));
    }
    if task.kind == TaskKind::Logistic && num_classes != task.num_classes {
        return Err(Error::config(
            "data.num_classes",
            "must equal task.num_classes for the logistic task",
        ));
    }
    if num_samples < num_classes {
        return Err(Error::config(
            "data.num_samples",
            "must be at least the number of classes",
        ));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("data.noise", "must be finite and nonnegative"));
    }
    Ok(())
}

/// Draw a synthetic dataset. Samples cycle through the classes, so every
/// class appears at least once when `num_samples >= num_classes`.
///
/// Logistic: class-conditional Gaussians around well separated means, with
/// `noise` as the within-class standard deviation. Quadratic: Gaussian
/// features around per-group means and `b = xᵀw* + noise·ε`.
pub fn synthesize_dataset(
    task: &TaskSpec,
    num_samples: usize,
    num_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    check_synth_args(task, num_samples, num_classes, noise)?;
    Generator::new(*task, num_classes, noise, seed).draw(num_samples)
}

/// Training set plus a held-out set drawn from the same distribution.
pub fn synthesize_with_holdout(
    task: &TaskSpec,
    num_samples: usize,
    num_test: usize,
    num_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Option<Dataset>)> {
    check_synth_args(task, num_samples, num_classes, noise)?;
    let mut gen = Generator::new(*task, num_classes, noise, seed);
    let train = gen.draw(num_samples)?;
    let test = if num_test > 0 { Some(gen.draw(num_test)?) } else { None };
    Ok((train, test))
}

/// Split `total` into integer counts proportional to `proportions`, rounding
/// by largest remainder (ties to the lower index).
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn build_shards(data: &Dataset, mut assigned: Vec<Vec<usize>>) -> Vec<ClientShard> {
    assigned
        .iter_mut()
        .enumerate()
        .map(|(client_id, idx)| {
            idx.sort_unstable();
            ClientShard {
                client_id,
                indices: idx.clone(),
                samples: data.samples.select(idx),
            }
        })
        .collect()
}

/// Non-IID partition: for every class, client shares are drawn from a
/// symmetric Dirichlet(`alpha`) over clients and that class's samples are
/// dealt out by largest-remainder rounding. Draws leaving a client empty are
/// rejected and redrawn, up to 100 times.
pub fn dirichlet_partition(num_clients: usize, alpha: f64, data: &Dataset, seed: u64) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(Error::config("clients_per_cluster", "need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(
            "data.alpha",
            "Dirichlet concentration must be positive and finite",
        ));
    }
    for class in 0..data.num_classes {
        if data.class_count(class) < num_clients {
            return Err(Error::config(
                "data.num_samples",
                format!("class {class} has fewer samples than there are clients"),
            ));
        }
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("data.alpha", e.to_string()))?;
    let mut rng = stream_rng(seed, 1);
    let by_class: Vec<Vec<usize>> = (0..data.num_classes)
        .map(|c| (0..data.len()).filter(|&i| data.classes[i] == c).collect())
        .collect();

    'attempt: for _ in 0..MAX_PARTITION_RETRIES {
        let mut assigned = vec![Vec::new(); num_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                continue 'attempt;
            }
            let props: Vec<f64> = draws.iter().map(|g| g / total).collect();
            let counts = largest_remainder(members.len(), &props);
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                assigned[client].extend_from_slice(&members[cursor..cursor + count]);
                cursor += count;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(build_shards(data, assigned));
        }
    }
    Err(Error::config(
        "data.alpha",
        format!("could not draw a partition without empty clients in {MAX_PARTITION_RETRIES} attempts"),
    ))
}

/// IID partition: shuffle and deal into near-equal contiguous chunks (sizes
/// differ by at most one).
pub fn iid_partition(num_clients: usize, data: &Dataset, seed: u64) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(Error::config("clients_per_cluster", "need at least one client"));
    }
    if data.len() < num_clients {
        return Err(Error::config("data.num_samples", "fewer samples than clients"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(seed, 1));
    let base = data.len() / num_clients;
    let extra = data.len() % num_clients;
    let mut cursor = 0;
    let assigned = (0..num_clients)
        .map(|i| {
            let n = base + usize::from(i < extra);
            let chunk = order[cursor..cursor + n].to_vec();
            cursor += n;
            chunk
        })
        .collect();
    Ok(build_shards(data, assigned))
}

/// Data-size weights for a client-to-cluster assignment.
pub fn compute_weights(sizes: &[usize], assignment: &[usize], num_clusters: usize) -> Result<DataWeights> {
    if sizes.len() != assignment.len() {
        return Err(Error::DimensionMismatch {
            expected: sizes.len(),
            actual: assignment.len(),
        });
    }
    if sizes.contains(&0) {
        return Err(Error::config_msg("every client needs at least one sample"));
    }
    let mut cluster_sizes = vec![0usize; num_clusters];
    for (&s, &d) in sizes.iter().zip(assignment) {
        if d >= num_clusters {
            return Err(Error::config_msg(format!("client assigned to unknown cluster {d}")));
        }
        cluster_sizes[d] += s;
    }
    if let Some(d) = cluster_sizes.iter().position(|&s| s == 0) {
        return Err(Error::config_msg(format!("cluster {d} has no clients")));
    }
    let total: usize = sizes.iter().sum();
    let m = sizes.iter().map(|&s| s as f64 / total as f64).collect();
    let m_hat = sizes
        .iter()
        .zip(assignment)
        .map(|(&s, &d)| s as f64 / cluster_sizes[d] as f64)
        .collect();
    let m_tilde = cluster_sizes.iter().map(|&s| s as f64 / total as f64).collect();
    Ok(DataWeights { m, m_hat, m_tilde })
}

/// Convenience over [`compute_weights`] taking shards directly.
pub fn compute_shard_weights(shards: &[ClientShard], assignment: &[usize], num_clusters: usize) -> Result<DataWeights> {
    let sizes: Vec<usize> = shards.iter().map(ClientShard::size).collect();
    compute_weights(&sizes, assignment, num_clusters)
}

/// CSV audit manifest, one `client_id,sample_index,class` row per sample.
pub fn partition_manifest(shards: &[ClientShard], data: &Dataset) -> String {
    let mut out = String::from("client_id,sample_index,class\n");
    for shard in shards {
        for &i in &shard.indices {
            let _ = writeln!(out, "{},{},{}", shard.client_id, i, data.classes[i]);
        }
    }
    out
}

pub fn write_partition_manifest(shards: &[ClientShard], data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, partition_manifest(shards, data)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_for_uniform_sizes() {
        let w = compute_weights(&[5, 5, 5, 5], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(w.m, vec![0.25; 4]);
        assert_eq!(w.m_hat, vec![0.5; 4]);
        assert_eq!(w.m_tilde, vec![0.5; 2]);
    }

    #[test]
    fn weights_hand_example() {
        let w = compute_weights(&[10, 30, 60], &[0, 0, 1], 2).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(&w.m_hat, &[0.25, 0.75, 1.0]));
        assert!(close(&w.m_tilde, &[0.4, 0.6]));
        assert!(close(&w.m, &[0.1, 0.3, 0.6]));
    }

    #[test]
    fn single_cluster_collapses() {
        let w = compute_weights(&[3, 7], &[0, 0], 1).unwrap();
        assert_eq!(w.m_tilde, vec![1.0]);
        assert_eq!(w.m, w.m_hat);
    }

    #[test]
    fn empty_cluster_is_rejected() {
        assert!(compute_weights(&[3, 7], &[0, 0], 2).is_err());
    }

    #[test]
    fn largest_remainder_preserves_total() {
        let c = largest_remainder(10, &[0.33, 0.33, 0.34]);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert_eq!(c, vec![3, 3, 4]);
        // exact ties go to the lower index
        assert_eq!(largest_remainder(1, &[0.5, 0.5]), vec![1, 0]);
    }

    #[test]
    fn single_client_gets_everything() {
        let task = TaskSpec::logistic(2, 3, 0.0);
        let data = synthesize_dataset(&task, 30, 3, 1.0, 4).unwrap();
        let shards = dirichlet_partition(1, 0.5, &data, 9).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn minimal_dataset_has_each_class_once() {
        let task = TaskSpec::logistic(3, 4, 0.0);
        let data = synthesize_dataset(&task, 4, 4, 1.0, 1).unwrap();
        let mut classes = data.classes.clone();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let task = TaskSpec::quadratic(4, 0.0);
        let a = synthesize_dataset(&task, 50, 2, 0.1, 11).unwrap();
        let b = synthesize_dataset(&task, 50, 2, 0.1, 11).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn holdout_shares_training_distribution_prefix() {
        let task = TaskSpec::logistic(2, 2, 0.0);
        let plain = synthesize_dataset(&task, 20, 2, 1.0, 3).unwrap();
        let (train, test) = synthesize_with_holdout(&task, 20, 10, 2, 1.0, 3).unwrap();
        assert_eq!(plain.samples, train.samples);
        assert_eq!(test.unwrap().len(), 10);
    }

    #[test]
    fn partition_rejects_nonpositive_alpha() {
        let task = TaskSpec::logistic(2, 2, 0.0);
        let data = synthesize_dataset(&task, 20, 2, 1.0, 3).unwrap();
        assert!(dirichlet_partition(2, 0.0, &data, 1).is_err());
    }

    #[test]
    fn partition_rejects_too_few_samples_per_class() {
        let task = TaskSpec::logistic(2, 2, 0.0);
        let data = synthesize_dataset(&task, 6, 2, 1.0, 3).unwrap();
        assert!(dirichlet_partition(4, 1.0, &data, 1).is_err());
    }

    #[test]
    fn iid_partition_sizes_differ_by_at_most_one() {
        let task = TaskSpec::quadratic(2, 0.0);
        let data = synthesize_dataset(&task, 23, 1, 0.0, 3).unwrap();
        let shards = iid_partition(5, &data, 2).unwrap();
        let sizes: Vec<usize> = shards.iter().map(ClientShard::size).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
    }

    #[test]
    fn manifest_lists_every_sample() {
        let task = TaskSpec::logistic(2, 2, 0.0);
        let data = synthesize_dataset(&task, 10, 2, 1.0, 3).unwrap();
        let shards = dirichlet_partition(2, 1.0, &data, 1).unwrap();
        let manifest = partition_manifest(&shards, &data);
        assert_eq!(manifest.lines().count(), 11);
        assert!(manifest.starts_with("client_id,sample_index,class\n"));
    }
}
