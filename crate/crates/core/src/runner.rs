//! Run an experiment end to end and write its artifacts:
//!
//! - `{run_id}_config.txt`: resolved configuration echo
//! - `{run_id}_partition.csv`: client data assignment
//! - `{run_id}_{mode}.csv` (or `.jsonl`): per-iteration trace
//! - `{run_id}_{mode}_model.txt`: consensus output, one parameter per line
//! - `{run_id}_summary.json`

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::write_partition_manifest;
use crate::error::{Error, Result};
use crate::metrics::{
    estimate_assumption_constants, export_trace, theorem_bound, time_to_target, AnalysisEstimates, BoundInputs,
    BoundReport, MetricsRecord,
};
use crate::model::{evaluate_loss, quadratic_optimum, smoothness_bound, ModelVector, TaskKind};
use crate::sim::{run_async, run_sync, staleness_bound, Experiment, Mode, RunFailure, RunResult};
use crate::topology::{spectral_gap, uniform_neighbor_matrix};

/// Mini-batch draws per client when estimating the noise constant.
const NOISE_PROBES: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub iterations: u64,
    pub sim_time: f64,
    pub final_loss: f64,
    pub time_to_target: Option<f64>,
    pub max_staleness_observed: u64,
    pub staleness_bound: u64,
    pub consensus_rounds: usize,
    pub consensus_converged: bool,
    pub consensus_distance: f64,
    /// Loss of the consensus output.
    pub output_loss: f64,
    /// `‖output − w*‖` for the quadratic task.
    pub distance_to_optimum: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub clusters: usize,
    pub clients: usize,
    pub target_loss: Option<f64>,
    pub estimates: AnalysisEstimates,
    pub runs: Vec<ModeSummary>,
    /// Set when a run diverged; its partial trace is still written.
    pub failure: Option<String>,
}

/// A run that stopped with an error after writing its partial outputs.
#[derive(Debug)]
pub struct RunError {
    pub error: Error,
    pub summary: Option<Box<RunSummary>>,
}

impl From<Error> for RunError {
    fn from(error: Error) -> Self {
        RunError { error, summary: None }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunError {}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn model_to_text(model: &ModelVector) -> String {
    let mut out = String::new();
    for v in model.as_slice() {
        let _ = writeln!(out, "{v:e}");
    }
    out
}

fn distance_to_optimum(exp: &Experiment, output: &ModelVector) -> Result<Option<f64>> {
    match exp.task.kind {
        TaskKind::Quadratic => Ok(Some(
            output.distance(&quadratic_optimum(&exp.task, &exp.train.samples)?),
        )),
        TaskKind::Logistic => Ok(None),
    }
}

/// ρ_max estimate: second-largest eigenvalue modulus of the uniform-neighbor
/// mixing matrix on the configured topology.
pub fn rho_max_hat(exp: &Experiment) -> Result<f64> {
    spectral_gap(&uniform_neighbor_matrix(&exp.topology))
}

fn estimates(exp: &Experiment, delta_max_observed: u64) -> Result<AnalysisEstimates> {
    let consts = estimate_assumption_constants(
        &exp.task,
        &exp.shards,
        &exp.weights,
        &exp.initial_model,
        exp.params.batch_size,
        NOISE_PROBES,
        exp.seed,
    )?;
    Ok(AnalysisEstimates {
        sigma_sq_hat: consts.sigma_sq_hat,
        kappa_hat: consts.kappa_hat,
        rho_max_hat: rho_max_hat(exp)?,
        heterogeneity_gap: exp.heterogeneity_gap(),
        delta_max_observed,
    })
}

fn summarize(exp: &Experiment, res: &RunResult, target: Option<f64>) -> Result<ModeSummary> {
    let last = res.trace.last().ok_or_else(|| Error::Invariant("empty trace".into()))?;
    let lat = exp.iteration_latencies()?;
    let lo = lat
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .min(res.latency_range.0);
    let hi = lat.iter().copied().fold(0.0, f64::max).max(res.latency_range.1);
    let output = &res.consensus.output;
    Ok(ModeSummary {
        mode: res.mode,
        iterations: last.k,
        sim_time: last.sim_time,
        final_loss: last.global_loss,
        time_to_target: target.and_then(|t| time_to_target(&res.trace, t)),
        max_staleness_observed: res.trace.iter().map(|r| r.max_staleness).max().unwrap_or(0),
        staleness_bound: staleness_bound(exp.num_clusters(), lo, hi),
        consensus_rounds: res.consensus.rounds,
        consensus_converged: res.consensus.converged,
        consensus_distance: res.consensus.final_distance(),
        output_loss: evaluate_loss(&exp.task, output, &exp.train.samples)?,
        distance_to_optimum: distance_to_optimum(exp, output)?,
    })
}

fn write_trace(cfg: &ExperimentConfig, dir: &Path, mode: Mode, trace: &[MetricsRecord]) -> Result<()> {
    let path = dir.join(format!("{}_{}.{}", cfg.run_id, mode, cfg.trace_format.extension()));
    export_trace(trace, &path, cfg.trace_format)
}

/// Validate, build and execute every requested mode, writing outputs into
/// `out_dir`. Nothing is written unless the configuration is valid.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> std::result::Result<RunSummary, RunError> {
    let exp = cfg.build_experiment()?;
    create_dir(out_dir)?;
    write_file(&out_dir.join(format!("{}_config.txt", cfg.run_id)), &cfg.to_text())?;
    write_partition_manifest(
        &exp.shards,
        &exp.train,
        &out_dir.join(format!("{}_partition.csv", cfg.run_id)),
    )?;

    let mut runs = Vec::new();
    let mut failure = None;
    for &mode in cfg.mode.modes() {
        let outcome = match mode {
            Mode::Async => run_async(&exp, &cfg.stop),
            Mode::Sync => run_sync(&exp, &cfg.stop),
        };
        match outcome {
            Ok(res) => {
                write_trace(cfg, out_dir, mode, &res.trace)?;
                write_file(
                    &out_dir.join(format!("{}_{}_model.txt", cfg.run_id, mode)),
                    &model_to_text(&res.consensus.output),
                )?;
                runs.push(summarize(&exp, &res, cfg.stop.target_loss)?);
            }
            Err(RunFailure { error, trace }) => {
                write_trace(cfg, out_dir, mode, &trace)?;
                failure = Some((mode, error));
                break;
            }
        }
    }

    let observed = runs.iter().map(|r| r.max_staleness_observed).max().unwrap_or(0);
    let summary = RunSummary {
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        clusters: cfg.clusters,
        clients: cfg.num_clients(),
        target_loss: cfg.stop.target_loss,
        estimates: estimates(&exp, observed)?,
        runs,
        failure: failure.as_ref().map(|(mode, e)| format!("{mode}: {e}")),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out_dir.join(format!("{}_summary.json", cfg.run_id)), &(json + "\n"))?;
    match failure {
        None => Ok(summary),
        Some((_, error)) => Err(RunError {
            error,
            summary: Some(Box::new(summary)),
        }),
    }
}

/// Run `count` replicates with seeds `seed, seed+1, ...` on up to
/// `parallel` threads. Replicate `i` writes into `out_dir/rep{i}`.
/// Results come back in replicate order.
pub fn run_replicates(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    count: usize,
    parallel: usize,
) -> Vec<(PathBuf, std::result::Result<RunSummary, RunError>)> {
    let jobs: Vec<(ExperimentConfig, PathBuf)> = (0..count)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            (c, out_dir.join(format!("rep{i}")))
        })
        .collect();
    let parallel = parallel.clamp(1, count.max(1));
    let mut results: Vec<Option<std::result::Result<RunSummary, RunError>>> = (0..count).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..parallel {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((c, dir)) = jobs.get(i) else { break };
                let r = run_experiment(c, dir);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    jobs.into_iter()
        .zip(results)
        .map(|((_, dir), r)| (dir, r.expect("every replicate ran")))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundEvaluation {
    pub inputs: BoundInputs,
    pub report: BoundReport,
}

/// Evaluate the convergence bound for a configuration without training.
/// Constants are measured at the initial model; δ_max is the worst-case
/// staleness bound for the configured latencies and K is the iteration
/// limit (1000 when unset).
pub fn evaluate_bound(cfg: &ExperimentConfig) -> Result<BoundEvaluation> {
    let exp = cfg.build_experiment()?;
    let lat = exp.iteration_latencies()?;
    let lo = lat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lat.iter().copied().fold(0.0, f64::max);
    let delta_max = staleness_bound(exp.num_clusters(), lo, hi);
    let est = estimates(&exp, 0)?;
    let initial_loss = evaluate_loss(&exp.task, &exp.initial_model, &exp.train.samples)?;
    let loss_gap = match exp.task.kind {
        TaskKind::Quadratic => {
            let opt = quadratic_optimum(&exp.task, &exp.train.samples)?;
            initial_loss - evaluate_loss(&exp.task, &opt, &exp.train.samples)?
        }
        // Cross-entropy plus a ridge term is nonnegative.
        TaskKind::Logistic => initial_loss,
    };
    let inputs = BoundInputs {
        eta: exp.params.eta,
        smoothness: smoothness_bound(&exp.task, &exp.train.samples)?,
        tau_min: exp.taus.iter().copied().min().unwrap_or(1) as f64,
        tau_max: exp.taus.iter().copied().max().unwrap_or(1) as f64,
        delta_max: delta_max as f64,
        heterogeneity_gap: est.heterogeneity_gap,
        sigma_sq: est.sigma_sq_hat,
        kappa_sq: est.kappa_hat * est.kappa_hat,
        rho_max: est.rho_max_hat,
        client_weights: exp.weights.m.clone(),
        iterations: cfg.stop.max_global_iters.unwrap_or(1000).max(1) as f64,
        loss_gap,
    };
    let report = theorem_bound(&inputs);
    Ok(BoundEvaluation { inputs, report })
}
