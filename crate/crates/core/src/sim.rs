//! Discrete-event driver. Each edge cluster completes iterations at its own
//! latency; every completion advances the global iteration counter by one.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, DataWeights, Dataset};
use crate::engine::{consensus_phase, ConsensusOutcome, Context, Federation, IterationLog, ProtocolParams};
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricsRecord};
use crate::model::{ModelVector, TaskSpec};
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// Size of one model upload in bits (32 per parameter).
    pub model_bits: f64,
    /// Client-to-server rate, bits/s.
    pub rate_client_server: f64,
    /// Server-to-server rate, bits/s.
    pub rate_server_server: f64,
    /// Floating-point operations per local step.
    pub flops_per_epoch: f64,
    /// Local steps per unit of compute speed.
    pub beta: f64,
}

impl LatencyParams {
    pub fn for_model(
        dim: usize,
        rate_client_server: f64,
        rate_server_server: f64,
        flops_per_epoch: f64,
        beta: f64,
    ) -> Self {
        LatencyParams {
            model_bits: 32.0 * dim as f64,
            rate_client_server,
            rate_server_server,
            flops_per_epoch,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("latency.model_bits", self.model_bits),
            ("latency.rate_client_server_bps", self.rate_client_server),
            ("latency.rate_server_server_bps", self.rate_server_server),
            ("latency.flops_per_epoch", self.flops_per_epoch),
            ("train.beta", self.beta),
        ];
        for (key, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        Ok(())
    }

    /// Upload plus server-exchange delay for one iteration.
    pub fn communication_delay(&self) -> f64 {
        self.model_bits / self.rate_client_server + self.model_bits / self.rate_server_server
    }
}

/// `τ = max(1, ⌊β·h⌋)`
pub fn epochs_for(speed: f64, beta: f64) -> u32 {
    let raw = (beta * speed).floor();
    if raw < 1.0 {
        1
    } else {
        raw.min(f64::from(u32::MAX)) as u32
    }
}

/// `T_iter = M_bit/R_ct-sr + M_bit/R_sr-sr + T_comp`
pub fn iteration_latency(deadline: f64, params: &LatencyParams) -> Result<f64> {
    if !(deadline > 0.0 && deadline.is_finite()) {
        return Err(Error::config(
            "cluster.t_comp_s",
            "computation deadline must be positive and finite",
        ));
    }
    params.validate()?;
    Ok(params.communication_delay() + deadline)
}

/// Deadline that lets the slowest client of a cluster finish `min_batches`
/// mini-batches, taking a client of speed `h` to need
/// `flops_per_epoch / h` seconds per mini-batch.
pub fn deadline_for_min_batches(cluster_speeds: &[f64], flops_per_epoch: f64, min_batches: u32) -> Result<f64> {
    let slowest = cluster_speeds.iter().copied().fold(f64::INFINITY, f64::min);
    if !(slowest > 0.0 && slowest.is_finite()) {
        return Err(Error::config("speeds", "cluster needs clients with positive speed"));
    }
    Ok(f64::from(min_batches) * flops_per_epoch / slowest)
}

/// A scheduled iteration completion. Ordered by time, then cluster, then
/// insertion sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub cluster_id: usize,
    pub sequence_number: u64,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.cluster_id.cmp(&other.cluster_id))
            .then(self.sequence_number.cmp(&other.sequence_number))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<SimEvent>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn schedule(&mut self, time: f64, cluster_id: usize) {
        let ev = SimEvent {
            time,
            cluster_id,
            sequence_number: self.next_seq,
        };
        self.next_seq += 1;
        self.heap.push(Reverse(ev));
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn peek(&self) -> Option<&SimEvent> {
        self.heap.peek().map(|Reverse(e)| e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GlobalClock {
    pub k: u64,
    pub sim_time: f64,
}

/// Any subset of limits; the first one reached ends the run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StopCriteria {
    pub max_sim_time: Option<f64>,
    pub max_global_iters: Option<u64>,
    pub target_loss: Option<f64>,
}

impl StopCriteria {
    pub fn is_unbounded(&self) -> bool {
        self.max_sim_time.is_none() && self.max_global_iters.is_none() && self.target_loss.is_none()
    }

    fn reached_k(&self, k: u64) -> bool {
        self.max_global_iters.is_some_and(|m| k >= m)
    }

    fn reached_loss(&self, loss: f64) -> bool {
        self.target_loss.is_some_and(|t| loss <= t)
    }

    fn beyond_time(&self, t: f64) -> bool {
        self.max_sim_time.is_some_and(|m| t > m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSettings {
    pub max_rounds: usize,
    pub tol: f64,
}

impl Default for ConsensusSettings {
    fn default() -> Self {
        ConsensusSettings {
            max_rounds: 1000,
            tol: 1e-8,
        }
    }
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub task: TaskSpec,
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub shards: Vec<ClientShard>,
    /// Cluster of each client.
    pub assignment: Vec<usize>,
    pub weights: DataWeights,
    pub topology: Topology,
    pub speeds: Vec<f64>,
    pub taus: Vec<u32>,
    pub deadlines: Vec<f64>,
    pub latency: LatencyParams,
    pub params: ProtocolParams,
    pub initial_model: ModelVector,
    /// Relative half-width of the uniform multiplicative latency jitter;
    /// zero keeps latencies deterministic.
    pub jitter: f64,
    pub consensus: ConsensusSettings,
    pub seed: u64,
}

impl Experiment {
    pub fn num_clusters(&self) -> usize {
        self.deadlines.len()
    }

    pub fn context(&self) -> Context<'_> {
        Context {
            task: &self.task,
            shards: &self.shards,
            weights: &self.weights,
            topology: &self.topology,
            params: &self.params,
        }
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            task: &self.task,
            train: &self.train.samples,
            test: self.test.as_ref().map(|t| &t.samples),
            weights: &self.weights,
        }
    }

    pub fn iteration_latencies(&self) -> Result<Vec<f64>> {
        self.deadlines
            .iter()
            .map(|&d| iteration_latency(d, &self.latency))
            .collect()
    }

    /// Shared step count of the synchronous baseline: the slowest client's τ.
    pub fn shared_tau(&self) -> u32 {
        self.taus.iter().copied().min().unwrap_or(1)
    }

    pub fn heterogeneity_gap(&self) -> f64 {
        let max = self.speeds.iter().copied().fold(f64::MIN, f64::max);
        let min = self.speeds.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }

    fn federation(&self) -> Result<Federation> {
        Federation::new(
            &self.initial_model,
            &self.assignment,
            &self.speeds,
            &self.taus,
            &self.deadlines,
            &self.shards,
            self.seed,
        )
    }

    fn jitter_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(3);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Async,
    Sync,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Async => "async",
            Mode::Sync => "sync",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub trace: Vec<MetricsRecord>,
    /// Server models when training stopped, before the consensus phase.
    pub models: Vec<ModelVector>,
    pub consensus: ConsensusOutcome,
    /// Shortest and longest realized iteration latency.
    pub latency_range: (f64, f64),
}

impl RunResult {
    pub fn final_model(&self) -> &ModelVector {
        &self.consensus.output
    }
}

/// A failed run together with the trace recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub trace: Vec<MetricsRecord>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} records)", self.error, self.trace.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// One processed completion event.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub record: MetricsRecord,
    pub log: IterationLog,
}

/// Stepwise asynchronous simulation. [`run_async`] drives it to a stop
/// criterion; tests can step it manually and inspect the federation.
pub struct AsyncSimulation<'a> {
    exp: &'a Experiment,
    federation: Federation,
    queue: EventQueue,
    clock: GlobalClock,
    latencies: Vec<f64>,
    completions: Vec<u64>,
    last_completion: Vec<f64>,
    jitter_rng: ChaCha8Rng,
    latency_range: (f64, f64),
    trace: Vec<MetricsRecord>,
}

impl<'a> AsyncSimulation<'a> {
    pub fn new(exp: &'a Experiment) -> Result<Self> {
        let latencies = exp.iteration_latencies()?;
        let federation = exp.federation()?;
        let d = exp.num_clusters();
        let initial = exp.evaluator().record(0, 0.0, &federation.models(), 0, None)?;
        let mut sim = AsyncSimulation {
            exp,
            federation,
            queue: EventQueue::default(),
            clock: GlobalClock::default(),
            latencies,
            completions: vec![0; d],
            last_completion: vec![0.0; d],
            jitter_rng: exp.jitter_rng(),
            latency_range: (f64::INFINITY, 0.0),
            trace: vec![initial],
        };
        for c in 0..d {
            sim.schedule_next(c);
        }
        Ok(sim)
    }

    fn schedule_next(&mut self, cluster: usize) {
        let base = self.latencies[cluster];
        let (time, latency) = if self.exp.jitter > 0.0 {
            let u: f64 = self.jitter_rng.random_range(-1.0..=1.0);
            let lat = base * (1.0 + self.exp.jitter * u);
            (self.last_completion[cluster] + lat, lat)
        } else {
            // Exact multiples keep ties between commensurate clusters exact.
            ((self.completions[cluster] + 1) as f64 * base, base)
        };
        self.latency_range.0 = self.latency_range.0.min(latency);
        self.latency_range.1 = self.latency_range.1.max(latency);
        self.queue.schedule(time, cluster);
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn clock(&self) -> GlobalClock {
        self.clock
    }

    pub fn trace(&self) -> &[MetricsRecord] {
        &self.trace
    }

    pub fn next_event_time(&self) -> Option<f64> {
        self.queue.peek().map(|e| e.time)
    }

    /// Process the next completion event.
    pub fn step(&mut self) -> Result<StepReport> {
        let ev = self
            .queue
            .pop()
            .ok_or_else(|| Error::Invariant("event queue ran dry".into()))?;
        if ev.time < self.clock.sim_time {
            return Err(Error::Invariant("event scheduled in the past".into()));
        }
        self.clock.sim_time = ev.time;
        self.clock.k += 1;
        let k = self.clock.k;
        let log = self.federation.async_iteration(ev.cluster_id, k, &self.exp.context())?;
        self.completions[ev.cluster_id] += 1;
        self.last_completion[ev.cluster_id] = ev.time;
        self.schedule_next(ev.cluster_id);
        let record = self.exp.evaluator().record(
            k,
            ev.time,
            &self.federation.models(),
            log.max_staleness,
            Some(ev.cluster_id),
        )?;
        self.trace.push(record.clone());
        Ok(StepReport { record, log })
    }

    /// Run until a stop criterion fires, then the consensus phase.
    pub fn run(mut self, stop: &StopCriteria) -> std::result::Result<RunResult, RunFailure> {
        if stop.is_unbounded() {
            return Err(RunFailure {
                error: Error::config("stop", "at least one stop criterion is required"),
                trace: self.trace,
            });
        }
        let mut done = stop.reached_loss(self.trace[0].global_loss);
        while !done && !stop.reached_k(self.clock.k) {
            match self.next_event_time() {
                Some(t) if !stop.beyond_time(t) => {}
                _ => break,
            }
            match self.step() {
                Ok(rep) => done = stop.reached_loss(rep.record.global_loss),
                Err(error) => {
                    return Err(RunFailure {
                        error,
                        trace: self.trace,
                    })
                }
            }
        }
        let exp = self.exp;
        let models = self.federation.models();
        let consensus = consensus_phase(
            &models,
            &exp.topology,
            &exp.weights,
            exp.consensus.max_rounds,
            exp.consensus.tol,
        );
        Ok(RunResult {
            mode: Mode::Async,
            trace: self.trace,
            models,
            consensus,
            latency_range: self.latency_range,
        })
    }
}

pub fn run_async(exp: &Experiment, stop: &StopCriteria) -> std::result::Result<RunResult, RunFailure> {
    let sim = AsyncSimulation::new(exp).map_err(|error| RunFailure {
        error,
        trace: Vec::new(),
    })?;
    sim.run(stop)
}

/// Stepwise synchronous baseline.
pub struct SyncSimulation<'a> {
    exp: &'a Experiment,
    federation: Federation,
    clock: GlobalClock,
    latencies: Vec<f64>,
    shared_tau: u32,
    jitter_rng: ChaCha8Rng,
    latency_range: (f64, f64),
    /// Latency of the upcoming round, drawn ahead so the time limit can be
    /// checked before the round runs.
    pending_latency: Option<f64>,
    trace: Vec<MetricsRecord>,
}

impl<'a> SyncSimulation<'a> {
    pub fn new(exp: &'a Experiment) -> Result<Self> {
        let latencies = exp.iteration_latencies()?;
        let federation = exp.federation()?;
        let initial = exp.evaluator().record(0, 0.0, &federation.models(), 0, None)?;
        Ok(SyncSimulation {
            exp,
            federation,
            clock: GlobalClock::default(),
            latencies,
            shared_tau: exp.shared_tau(),
            jitter_rng: exp.jitter_rng(),
            latency_range: (f64::INFINITY, 0.0),
            pending_latency: None,
            trace: vec![initial],
        })
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn clock(&self) -> GlobalClock {
        self.clock
    }

    /// Simulated time at which the next round would finish.
    pub fn next_round_end(&mut self) -> f64 {
        let lat = match self.pending_latency {
            Some(l) => l,
            None => {
                let l = self.draw_round_latency();
                self.pending_latency = Some(l);
                l
            }
        };
        self.clock.sim_time + lat
    }

    /// Latency of a round: the slowest cluster's iteration.
    fn draw_round_latency(&mut self) -> f64 {
        let mut worst = 0.0_f64;
        for &base in &self.latencies {
            let lat = if self.exp.jitter > 0.0 {
                let u: f64 = self.jitter_rng.random_range(-1.0..=1.0);
                base * (1.0 + self.exp.jitter * u)
            } else {
                base
            };
            self.latency_range.0 = self.latency_range.0.min(lat);
            self.latency_range.1 = self.latency_range.1.max(lat);
            worst = worst.max(lat);
        }
        worst
    }

    /// One barrier round; advances k by the number of clusters.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let end = self.next_round_end();
        self.pending_latency = None;
        self.clock.sim_time = end;
        self.clock.k += self.exp.num_clusters() as u64;
        let k = self.clock.k;
        self.federation.sync_round(self.shared_tau, k, &self.exp.context())?;
        let record = self
            .exp
            .evaluator()
            .record(k, self.clock.sim_time, &self.federation.models(), 0, None)?;
        self.trace.push(record.clone());
        Ok(record)
    }

    pub fn run(mut self, stop: &StopCriteria) -> std::result::Result<RunResult, RunFailure> {
        if stop.is_unbounded() {
            return Err(RunFailure {
                error: Error::config("stop", "at least one stop criterion is required"),
                trace: self.trace,
            });
        }
        let mut done = stop.reached_loss(self.trace[0].global_loss);
        while !done && !stop.reached_k(self.clock.k) {
            let end = self.next_round_end();
            if stop.beyond_time(end) {
                break;
            }
            match self.step() {
                Ok(rec) => done = stop.reached_loss(rec.global_loss),
                Err(error) => {
                    return Err(RunFailure {
                        error,
                        trace: self.trace,
                    })
                }
            }
        }
        let exp = self.exp;
        let models = self.federation.models();
        let consensus = consensus_phase(
            &models,
            &exp.topology,
            &exp.weights,
            exp.consensus.max_rounds,
            exp.consensus.tol,
        );
        Ok(RunResult {
            mode: Mode::Sync,
            trace: self.trace,
            models,
            consensus,
            latency_range: self.latency_range,
        })
    }
}

pub fn run_sync(exp: &Experiment, stop: &StopCriteria) -> std::result::Result<RunResult, RunFailure> {
    let sim = SyncSimulation::new(exp).map_err(|error| RunFailure {
        error,
        trace: Vec::new(),
    })?;
    sim.run(stop)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessReport {
    pub observed_max: u64,
    pub bound: u64,
}

/// `(D − 1)·⌈T_max/T_min⌉ + (D − 1)`: between two completions of one
/// cluster every other cluster completes at most `⌈T_max/T_min⌉ + 1` times.
pub fn staleness_bound(num_clusters: usize, latency_min: f64, latency_max: f64) -> u64 {
    let others = num_clusters.saturating_sub(1) as u64;
    let ratio = (latency_max / latency_min).ceil() as u64;
    others * ratio + others
}

/// Check the observed staleness on a trace against [`staleness_bound`].
pub fn staleness_bound_check(
    trace: &[MetricsRecord],
    num_clusters: usize,
    latency_min: f64,
    latency_max: f64,
) -> Result<StalenessReport> {
    let observed_max = trace.iter().map(|r| r.max_staleness).max().unwrap_or(0);
    let bound = staleness_bound(num_clusters, latency_min, latency_max);
    if observed_max > bound {
        return Err(Error::Invariant(format!(
            "observed staleness {observed_max} exceeds bound {bound}"
        )));
    }
    Ok(StalenessReport { observed_max, bound })
}
