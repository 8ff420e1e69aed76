//! Diagnostics of the global model and the convergence-bound calculator.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, DataWeights};
use crate::error::{Error, Result};
use crate::model::{evaluate_accuracy, evaluate_gradient, evaluate_loss, ModelVector, SampleBatch, TaskKind, TaskSpec};

pub const CSV_HEADER: &str =
    "k,sim_time,global_loss,grad_norm_sq,consensus_error,max_staleness,trigger_cluster,test_accuracy";

/// Snapshot of the system after global iteration `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub k: u64,
    pub sim_time: f64,
    /// `F(ȳ_k)` over the full training set.
    pub global_loss: f64,
    /// `‖∇F(ȳ_k)‖²`
    pub grad_norm_sq: f64,
    pub consensus_error: f64,
    pub max_staleness: u64,
    /// Cluster whose completion produced this record; `None` for the initial
    /// record and for synchronous rounds.
    pub trigger_cluster: Option<usize>,
    pub test_accuracy: Option<f64>,
}

/// `ȳ = Σ_d m̃_d y_d`
pub fn auxiliary_global(models: &[ModelVector], weights: &DataWeights) -> ModelVector {
    let dim = models.first().map(ModelVector::len).unwrap_or(0);
    ModelVector::weighted_sum(dim, weights.m_tilde.iter().copied().zip(models))
}

/// `Σ_d m̃_d ‖ȳ − y_d‖²`
pub fn consensus_error(models: &[ModelVector], weights: &DataWeights) -> f64 {
    let avg = auxiliary_global(models, weights);
    weights
        .m_tilde
        .iter()
        .zip(models)
        .map(|(w, m)| {
            let dist = avg.distance(m);
            w * dist * dist
        })
        .sum()
}

/// Computes [`MetricsRecord`]s from cluster models.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub task: &'a TaskSpec,
    pub train: &'a SampleBatch,
    pub test: Option<&'a SampleBatch>,
    pub weights: &'a DataWeights,
}

impl Evaluator<'_> {
    pub fn record(
        &self,
        k: u64,
        sim_time: f64,
        models: &[ModelVector],
        max_staleness: u64,
        trigger_cluster: Option<usize>,
    ) -> Result<MetricsRecord> {
        let avg = auxiliary_global(models, self.weights);
        let global_loss = evaluate_loss(self.task, &avg, self.train)?;
        let grad_norm_sq = evaluate_gradient(self.task, &avg, self.train)?.norm_sq();
        let test_accuracy = match (self.task.kind, self.test) {
            (TaskKind::Logistic, Some(test)) => Some(evaluate_accuracy(self.task, &avg, test)?),
            _ => None,
        };
        let record = MetricsRecord {
            k,
            sim_time,
            global_loss,
            grad_norm_sq,
            consensus_error: consensus_error(models, self.weights),
            max_staleness,
            trigger_cluster,
            test_accuracy,
        };
        if !(record.global_loss.is_finite() && record.grad_norm_sq.is_finite() && record.consensus_error.is_finite()) {
            return Err(Error::Diverged { k });
        }
        Ok(record)
    }
}

/// Empirical counterparts of the gradient-noise and non-IID constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    /// Largest per-client mean of `‖g(ξ) − ∇F_i‖²` over random mini-batches.
    pub sigma_sq_hat: f64,
    /// `max_i ‖∇F_i − ∇F‖`
    pub kappa_hat: f64,
}

/// Quantities entering the convergence bound, as measured on a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisEstimates {
    pub sigma_sq_hat: f64,
    pub kappa_hat: f64,
    pub rho_max_hat: f64,
    pub heterogeneity_gap: f64,
    pub delta_max_observed: u64,
}

/// Estimate the noise and dissimilarity constants at `probe`.
/// `∇F` is the `m`-weighted average of the client gradients.
pub fn estimate_assumption_constants(
    task: &TaskSpec,
    shards: &[ClientShard],
    weights: &DataWeights,
    probe: &ModelVector,
    batch_size: usize,
    num_probes: usize,
    seed: u64,
) -> Result<AssumptionConstants> {
    if num_probes == 0 {
        return Err(Error::Validation("need at least one probe".into()));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let full: Vec<ModelVector> = shards
        .iter()
        .map(|s| evaluate_gradient(task, probe, &s.samples))
        .collect::<Result<_>>()?;
    let global = ModelVector::weighted_sum(probe.len(), weights.m.iter().copied().zip(&full));
    let kappa_hat = full.iter().map(|g| g.distance(&global)).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut sigma_sq_hat = 0.0_f64;
    for (shard, grad) in shards.iter().zip(&full) {
        let n = shard.size();
        let mut order: Vec<usize> = (0..n).collect();
        let mut acc = 0.0;
        for _ in 0..num_probes {
            let batch = if batch_size >= n {
                shard.samples.clone()
            } else {
                order.shuffle(&mut rng);
                shard.samples.select(&order[..batch_size])
            };
            let dist = evaluate_gradient(task, probe, &batch)?.distance(grad);
            acc += dist * dist;
        }
        sigma_sq_hat = sigma_sq_hat.max(acc / num_probes as f64);
    }
    Ok(AssumptionConstants {
        sigma_sq_hat,
        kappa_hat,
    })
}

/// Inputs of the convergence-bound calculator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eta: f64,
    pub smoothness: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub delta_max: f64,
    pub heterogeneity_gap: f64,
    pub sigma_sq: f64,
    pub kappa_sq: f64,
    pub rho_max: f64,
    /// Client data weights `m_i`.
    pub client_weights: Vec<f64>,
    /// Number of global iterations K.
    pub iterations: f64,
    /// `F(ȳ_0) − F(ȳ_K)`; any upper bound such as `F(ȳ_0) − F*` works.
    pub loss_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub u1: f64,
    pub u2: f64,
    pub u3: f64,
    pub u4: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `1 − 2η²L²U₂ > 0`
    pub variance_condition: bool,
    /// `1 − ηLHτ_max − C ≥ 0`
    pub step_condition: bool,
    pub feasible: bool,
    /// Bound on the average squared gradient norm of the auxiliary model;
    /// `+∞` when the inputs are outside the region where it is defined.
    pub bound: f64,
}

/// Evaluate the learning-rate conditions and the right-hand side of the
/// average-gradient bound.
///
/// Every accumulated mixing-deviation sum is closed with
/// `S = 1/(1 − ρ_max)`: the single sum becomes `S`, squared sums and the
/// cross term become `S²`. This is a conservative surrogate for the exact
/// ρ sums, which depend on the realized mixing sequence.
pub fn theorem_bound(inp: &BoundInputs) -> BoundReport {
    let tau_max = inp.tau_max;
    let u2 = tau_max * (tau_max - 1.0);
    let q = inp.eta * inp.eta * inp.smoothness * inp.smoothness;
    let denom = 1.0 - 2.0 * q * u2;
    let variance_condition = denom > 0.0;

    let s = if inp.rho_max < 1.0 {
        1.0 / (1.0 - inp.rho_max)
    } else {
        f64::INFINITY
    };
    let (u1, u3, u4) = if variance_condition {
        (
            (1.0 - 14.0 * q * u2) / denom,
            (1.0 + 4.0 * q * u2) / denom,
            (1.0 + 22.0 * q * u2) / denom,
        )
    } else {
        (f64::NAN, f64::INFINITY, f64::INFINITY)
    };

    let dm2 = inp.delta_max * inp.delta_max;
    let h = inp.heterogeneity_gap;
    // 0·∞ terms (η = 0 with ρ_max = 1) are taken as 0.
    let prod = |coef: f64, factor: f64| if coef == 0.0 { 0.0 } else { coef * factor };
    let a = 4.0 * q * dm2 * tau_max * h * u4 + 4.0 * q * (tau_max - 1.0) / denom + prod(8.0 * q * tau_max * h * u3, s);
    let b = 8.0 * q * dm2 * tau_max * h * u4 + 24.0 * q * u2 / denom + prod(16.0 * q * tau_max * h * u3, s * s);
    let c = 8.0 * q * dm2 * tau_max * u4 + prod(16.0 * q * tau_max * tau_max * u3, s * s);

    let step_condition = variance_condition && 1.0 - inp.eta * inp.smoothness * h * tau_max - c >= 0.0;
    let feasible = variance_condition && step_condition;

    let bound = if variance_condition && u1 > 0.0 {
        let sum_m2: f64 = inp.client_weights.iter().map(|m| m * m).sum();
        2.0 * inp.loss_gap / (inp.eta * inp.tau_min * u1 * inp.iterations)
            + inp.eta * inp.smoothness * h * h * sum_m2 * inp.sigma_sq / u1
            + a * inp.sigma_sq / u1
            + b * inp.kappa_sq / u1
    } else {
        f64::INFINITY
    };

    BoundReport {
        u1,
        u2,
        u3,
        u4,
        a,
        b,
        c,
        variance_condition,
        step_condition,
        feasible,
        bound,
    }
}

/// `(1/K) Σ_{k<K} ‖∇F(ȳ_k)‖²` for every prefix length `K = 1..=len`.
pub fn running_average_grad_norm(trace: &[MetricsRecord]) -> Vec<f64> {
    let mut sum = 0.0;
    trace
        .iter()
        .enumerate()
        .map(|(i, r)| {
            sum += r.grad_norm_sq;
            sum / (i + 1) as f64
        })
        .collect()
}

/// Simulated time of the first record whose loss is at or below `target`.
pub fn time_to_target(trace: &[MetricsRecord], target: f64) -> Option<f64> {
    trace.iter().find(|r| r.global_loss <= target).map(|r| r.sim_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Jsonl,
}

impl TraceFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_to_csv(trace: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.k,
            r.sim_time,
            r.global_loss,
            r.grad_norm_sq,
            r.consensus_error,
            r.max_staleness,
            opt(r.trigger_cluster),
            opt(r.test_accuracy)
        );
    }
    out
}

pub fn trace_to_jsonl(trace: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        // Serializing a plain struct of numbers cannot fail.
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_csv_trace(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing or unexpected header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |message: String| Error::Parse { line: i + 1, message };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(bad(format!("expected 8 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            let int = |s: &str| s.parse::<u64>().map_err(|e| bad(e.to_string()));
            Ok(MetricsRecord {
                k: int(cols[0])?,
                sim_time: num(cols[1])?,
                global_loss: num(cols[2])?,
                grad_norm_sq: num(cols[3])?,
                consensus_error: num(cols[4])?,
                max_staleness: int(cols[5])?,
                trigger_cluster: if cols[6].is_empty() {
                    None
                } else {
                    Some(int(cols[6])? as usize)
                },
                test_accuracy: if cols[7].is_empty() { None } else { Some(num(cols[7])?) },
            })
        })
        .collect()
}

pub fn parse_jsonl_trace(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn export_trace(trace: &[MetricsRecord], path: &Path, format: TraceFormat) -> Result<()> {
    let body = match format {
        TraceFormat::Csv => trace_to_csv(trace),
        TraceFormat::Jsonl => trace_to_jsonl(trace),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
