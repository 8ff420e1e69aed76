//! Protocol steps of asynchronous SD-FEEL: local SGD with normalized
//! deltas, intra-cluster aggregation, staleness-aware inter-cluster mixing,
//! broadcast, the terminal consensus phase, and the barrier-synchronized
//! baseline round.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, DataWeights};
use crate::error::{Error, Result};
use crate::model::{evaluate_gradient, ModelVector, TaskSpec};
use crate::topology::{build_mixing_matrix, uniform_neighbor_matrix, MixingMatrix, Psi, StalenessVector, Topology};

/// Stream offset so client mini-batch streams never collide with the data,
/// partition or initialization streams.
const CLIENT_STREAM_BASE: u64 = 1 << 20;

/// Mini-batch sampler: without replacement within a pass over the shard,
/// reshuffled whenever fewer than `batch_size` unseen samples remain.
/// A batch covering the whole shard is taken in natural order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(shard_size: usize, seed: u64, client_id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(CLIENT_STREAM_BASE + client_id as u64);
        BatchSampler {
            rng,
            order: (0..shard_size).collect(),
            cursor: shard_size,
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> &[usize] {
        let n = self.order.len();
        if batch_size >= n {
            return &self.order;
        }
        if self.cursor + batch_size > n {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += batch_size;
        &self.order[start..self.cursor]
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub cluster_id: usize,
    /// Compute speed h (FLOPS-proportional).
    pub speed: f64,
    /// Local steps per iteration.
    pub tau: u32,
    /// Model received at the last broadcast.
    pub start_model: ModelVector,
    /// Global iteration of that broadcast.
    pub start_k: u64,
    pub sampler: BatchSampler,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub cluster_id: usize,
    /// Current server model y.
    pub model: ModelVector,
    /// Server model as of the last broadcast.
    pub broadcast_model: ModelVector,
    /// Local computation deadline in seconds.
    pub deadline: f64,
    pub clients: Vec<usize>,
    pub last_broadcast_k: u64,
}

/// Normalized local update `Δ = (w_τ − w_0)/τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub client_id: usize,
    pub delta: ModelVector,
    pub tau: u32,
    /// Sum of the τ mini-batch gradients that produced `delta`.
    pub grad_sum: ModelVector,
    /// `w_τ`, the client's model at the end of local training.
    pub end_model: ModelVector,
}

/// Which server model the intra-cluster aggregate is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntraBase {
    /// The server model at the aggregation instant, including any neighbor
    /// mixing absorbed since the last broadcast.
    #[default]
    Current,
    /// The model the clients started from.
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub eta: f64,
    pub batch_size: usize,
    pub psi: Psi,
    pub intra_base: IntraBase,
}

/// Run `tau` mini-batch SGD steps from `start_model` on `shard`.
///
/// `k` only labels a divergence error.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    client_id: usize,
    sampler: &mut BatchSampler,
    start_model: &ModelVector,
    tau: u32,
    eta: f64,
    batch_size: usize,
    task: &TaskSpec,
    shard: &ClientShard,
    k: u64,
) -> Result<UpdateDelta> {
    if tau == 0 {
        return Err(Error::Validation("tau must be at least 1".into()));
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::Validation("learning rate must be positive".into()));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    // A shard smaller than one batch is used whole.
    let batch_size = batch_size.min(shard.size());
    let mut w = start_model.clone();
    let mut grad_sum = ModelVector::zeros(w.len());
    for _ in 0..tau {
        let batch = shard.samples.select(sampler.next_batch(batch_size));
        let g = evaluate_gradient(task, &w, &batch)?;
        w.axpy(-eta, &g);
        grad_sum.axpy(1.0, &g);
        if !w.is_finite() {
            return Err(Error::Diverged { k });
        }
    }
    let t = f64::from(tau);
    let delta = ModelVector::from_vec(
        w.as_slice()
            .iter()
            .zip(start_model.as_slice())
            .map(|(end, start)| (end - start) / t)
            .collect(),
    );
    debug_assert!({
        let scale = 1.0_f64.max(w.norm()).max(start_model.norm());
        let mut check = delta.clone();
        check.axpy(eta / t, &grad_sum);
        check.as_slice().iter().all(|v| v.abs() <= 1e-12 * scale)
    });
    Ok(UpdateDelta {
        client_id,
        delta,
        tau,
        grad_sum,
        end_model: w,
    })
}

/// Outcome of intra-cluster aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraAggregate {
    /// `ŷ = y + τ̄ Σ m̂_i Δ_i`
    pub model: ModelVector,
    /// `τ̄ = Σ m̂_i τ_i`
    pub tau_bar: f64,
    /// `Σ (m̂_i/τ_i) Σ_l g_l`, the per-cluster column of the gradient matrix
    /// in the auxiliary-model recursion.
    pub grad_term: ModelVector,
}

pub fn intra_aggregate(
    cluster: &ClusterState,
    deltas: &[UpdateDelta],
    weights: &DataWeights,
    base: IntraBase,
) -> Result<IntraAggregate> {
    let y = match base {
        IntraBase::Current => &cluster.model,
        IntraBase::Broadcast => &cluster.broadcast_model,
    };
    let dim = y.len();
    let mut tau_bar = 0.0;
    let mut avg_delta = ModelVector::zeros(dim);
    let mut grad_term = ModelVector::zeros(dim);
    for &client in &cluster.clients {
        let upd = deltas.iter().find(|u| u.client_id == client).ok_or_else(|| {
            Error::Protocol(format!(
                "cluster {} is missing the delta of client {client}",
                cluster.cluster_id
            ))
        })?;
        upd.delta.check_dim(dim)?;
        let m_hat = weights.m_hat[client];
        tau_bar += m_hat * f64::from(upd.tau);
        avg_delta.axpy(m_hat, &upd.delta);
        grad_term.axpy(m_hat / f64::from(upd.tau), &upd.grad_sum);
    }
    let mut model = y.clone();
    model.axpy(tau_bar, &avg_delta);
    Ok(IntraAggregate {
        model,
        tau_bar,
        grad_term,
    })
}

/// Apply the mixing for a trigger: every `j ∈ N_d ∪ {d}` becomes
/// `Σ_{j'∈N_j∪{j}} p(j', j) · contribution(j')`. Other entries of `models`
/// are left untouched. `models[d]` must already hold the trigger's ŷ.
pub fn inter_aggregate(
    trigger: usize,
    models: &mut [ModelVector],
    topology: &Topology,
    p: &MixingMatrix,
) -> Result<()> {
    let dim = models.first().map(ModelVector::len).unwrap_or(0);
    for m in models.iter() {
        m.check_dim(dim)?;
    }
    if p.dim() != models.len() || topology.num_servers() != models.len() {
        return Err(Error::DimensionMismatch {
            expected: models.len(),
            actual: p.dim(),
        });
    }
    let targets: Vec<usize> = std::iter::once(trigger)
        .chain(topology.neighbors(trigger).iter().copied())
        .collect();
    let updated: Vec<ModelVector> = targets
        .iter()
        .map(|&j| mix_column(j, models, topology, p, dim))
        .collect();
    for (j, m) in targets.into_iter().zip(updated) {
        models[j] = m;
    }
    Ok(())
}

fn mix_column(j: usize, models: &[ModelVector], topology: &Topology, p: &MixingMatrix, dim: usize) -> ModelVector {
    ModelVector::weighted_sum(
        dim,
        std::iter::once(j)
            .chain(topology.neighbors(j).iter().copied())
            .map(|src| (p.get(src, j), &models[src])),
    )
}

/// Simultaneous mixing of all servers with `p`.
pub fn mix_all(models: &[ModelVector], topology: &Topology, p: &MixingMatrix) -> Vec<ModelVector> {
    let dim = models.first().map(ModelVector::len).unwrap_or(0);
    (0..models.len())
        .map(|j| mix_column(j, models, topology, p, dim))
        .collect()
}

/// Hand the server model to every client of the cluster and record the
/// broadcast iteration.
pub fn broadcast(cluster: &mut ClusterState, clients: &mut [ClientState], k: u64) {
    for &i in &cluster.clients {
        clients[i].start_model = cluster.model.clone();
        clients[i].start_k = k;
    }
    cluster.broadcast_model = cluster.model.clone();
    cluster.last_broadcast_k = k;
}

pub fn max_pairwise_distance(models: &[ModelVector]) -> f64 {
    let mut worst = 0.0_f64;
    for a in 0..models.len() {
        for b in (a + 1)..models.len() {
            worst = worst.max(models[a].distance(&models[b]));
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutcome {
    /// `Σ m̃_d y_d` over the final models.
    pub output: ModelVector,
    pub models: Vec<ModelVector>,
    pub rounds: usize,
    /// Max pairwise distance before round 1, after round 1, and so on.
    pub distance_history: Vec<f64>,
    pub converged: bool,
}

impl ConsensusOutcome {
    pub fn final_distance(&self) -> f64 {
        self.distance_history.last().copied().unwrap_or(0.0)
    }
}

/// Pure model exchange with the uniform-neighbor matrix until the largest
/// pairwise distance drops below `tol` or `max_rounds` rounds have run.
/// Not converging is reported through `converged`, not as an error.
pub fn consensus_phase(
    models: &[ModelVector],
    topology: &Topology,
    weights: &DataWeights,
    max_rounds: usize,
    tol: f64,
) -> ConsensusOutcome {
    let w = uniform_neighbor_matrix(topology);
    let mut current = models.to_vec();
    let mut history = vec![max_pairwise_distance(&current)];
    let mut rounds = 0;
    while history[rounds] >= tol && rounds < max_rounds {
        current = mix_all(&current, topology, &w);
        rounds += 1;
        history.push(max_pairwise_distance(&current));
    }
    let dim = current.first().map(ModelVector::len).unwrap_or(0);
    let output = ModelVector::weighted_sum(dim, weights.m_tilde.iter().copied().zip(current.iter()));
    ConsensusOutcome {
        output,
        converged: history[rounds] < tol,
        models: current,
        rounds,
        distance_history: history,
    }
}

/// Per-iteration log of an aggregation, with the quantities needed to
/// replay the auxiliary-model recursion.
#[derive(Debug, Clone)]
pub struct IterationLog {
    pub k: u64,
    pub trigger: usize,
    pub tau_bar: f64,
    pub grad_term: ModelVector,
    pub mixing: MixingMatrix,
    /// Largest `k − k'(j)` over clusters after the broadcast.
    pub max_staleness: u64,
}

/// Read-only inputs shared by every protocol step of a run.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub task: &'a TaskSpec,
    pub shards: &'a [ClientShard],
    pub weights: &'a DataWeights,
    pub topology: &'a Topology,
    pub params: &'a ProtocolParams,
}

/// All mutable protocol state: servers, clients, and staleness.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clusters: Vec<ClusterState>,
    pub clients: Vec<ClientState>,
    pub staleness: StalenessVector,
}

impl Federation {
    /// Every server and client starts from `initial`; `assignment[i]` is the
    /// cluster of client `i`.
    pub fn new(
        initial: &ModelVector,
        assignment: &[usize],
        speeds: &[f64],
        taus: &[u32],
        deadlines: &[f64],
        shards: &[ClientShard],
        seed: u64,
    ) -> Result<Self> {
        let num_clusters = deadlines.len();
        let n = assignment.len();
        if speeds.len() != n || taus.len() != n || shards.len() != n {
            return Err(Error::config_msg(
                "per-client settings disagree on the number of clients",
            ));
        }
        let clusters = (0..num_clusters)
            .map(|d| ClusterState {
                cluster_id: d,
                model: initial.clone(),
                broadcast_model: initial.clone(),
                deadline: deadlines[d],
                clients: (0..n).filter(|&i| assignment[i] == d).collect(),
                last_broadcast_k: 0,
            })
            .collect::<Vec<_>>();
        if let Some(c) = clusters.iter().find(|c| c.clients.is_empty()) {
            return Err(Error::config_msg(format!("cluster {} has no clients", c.cluster_id)));
        }
        let clients = (0..n)
            .map(|i| ClientState {
                client_id: i,
                cluster_id: assignment[i],
                speed: speeds[i],
                tau: taus[i],
                start_model: initial.clone(),
                start_k: 0,
                sampler: BatchSampler::new(shards[i].size(), seed, i),
            })
            .collect();
        Ok(Federation {
            clusters,
            clients,
            staleness: StalenessVector::new(num_clusters),
        })
    }

    pub fn models(&self) -> Vec<ModelVector> {
        self.clusters.iter().map(|c| c.model.clone()).collect()
    }

    fn collect_deltas(
        &mut self,
        d: usize,
        tau_override: Option<u32>,
        k: u64,
        ctx: &Context<'_>,
    ) -> Result<Vec<UpdateDelta>> {
        let members = self.clusters[d].clients.clone();
        let mut deltas = Vec::with_capacity(members.len());
        for i in members {
            let client = &mut self.clients[i];
            if client.start_k > k {
                return Err(Error::Invariant(format!(
                    "client {i} trains on a model from iteration {} at iteration {k}",
                    client.start_k
                )));
            }
            let tau = tau_override.unwrap_or(client.tau);
            deltas.push(local_update(
                i,
                &mut client.sampler,
                &client.start_model,
                tau,
                ctx.params.eta,
                ctx.params.batch_size,
                ctx.task,
                &ctx.shards[i],
                k,
            )?);
        }
        Ok(deltas)
    }

    /// One asynchronous iteration `k` triggered by cluster `trigger`:
    /// local updates of its clients, intra-cluster aggregation,
    /// staleness-aware mixing with its neighbors, and broadcast.
    pub fn async_iteration(&mut self, trigger: usize, k: u64, ctx: &Context<'_>) -> Result<IterationLog> {
        let deltas = self.collect_deltas(trigger, None, k, ctx)?;
        let intra = intra_aggregate(&self.clusters[trigger], &deltas, ctx.weights, ctx.params.intra_base)?;

        // The trigger's contribution is fresh, so its staleness is zero.
        self.staleness.current_k = k;
        self.staleness.last_broadcast[trigger] = k;
        let p = build_mixing_matrix(trigger, ctx.topology, &self.staleness, &ctx.params.psi);

        let mut models = self.models();
        models[trigger] = intra.model;
        inter_aggregate(trigger, &mut models, ctx.topology, &p)?;
        if models.iter().any(|m| !m.is_finite()) {
            return Err(Error::Diverged { k });
        }
        for (cluster, m) in self.clusters.iter_mut().zip(models) {
            cluster.model = m;
        }
        broadcast(&mut self.clusters[trigger], &mut self.clients, k);

        Ok(IterationLog {
            k,
            trigger,
            tau_bar: intra.tau_bar,
            grad_term: intra.grad_term,
            mixing: p,
            max_staleness: self.staleness.max_staleness(),
        })
    }

    /// Barrier-synchronized round: every client runs `shared_tau` steps,
    /// every cluster aggregates, then all servers mix simultaneously with the
    /// uniform-neighbor matrix and broadcast. `k` is the iteration counter
    /// after the round.
    pub fn sync_round(&mut self, shared_tau: u32, k: u64, ctx: &Context<'_>) -> Result<Vec<IterationLog>> {
        let d_count = self.clusters.len();
        let mut fresh = Vec::with_capacity(d_count);
        let mut logs = Vec::with_capacity(d_count);
        for d in 0..d_count {
            let deltas = self.collect_deltas(d, Some(shared_tau), k, ctx)?;
            let intra = intra_aggregate(&self.clusters[d], &deltas, ctx.weights, ctx.params.intra_base)?;
            fresh.push(intra.model);
            logs.push((intra.tau_bar, intra.grad_term));
        }
        let w = uniform_neighbor_matrix(ctx.topology);
        let mixed = mix_all(&fresh, ctx.topology, &w);
        if mixed.iter().any(|m| !m.is_finite()) {
            return Err(Error::Diverged { k });
        }
        for (cluster, m) in self.clusters.iter_mut().zip(mixed) {
            cluster.model = m;
        }
        self.staleness.current_k = k;
        for d in 0..d_count {
            self.staleness.last_broadcast[d] = k;
            broadcast(&mut self.clusters[d], &mut self.clients, k);
        }
        Ok(logs
            .into_iter()
            .enumerate()
            .map(|(d, (tau_bar, grad_term))| IterationLog {
                k,
                trigger: d,
                tau_bar,
                grad_term,
                mixing: w.clone(),
                max_staleness: 0,
            })
            .collect())
    }
}
