//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sdfeel::config::ExperimentConfig;
use sdfeel::data::{compute_weights, synthesize_dataset, ClientShard};
use sdfeel::engine::{
    consensus_phase, intra_aggregate, local_update, mix_all, BatchSampler, ClusterState, UpdateDelta,
};
use sdfeel::metrics::{auxiliary_global, theorem_bound, time_to_target, trace_to_csv, BoundInputs, MetricsRecord};
use sdfeel::model::{finite_difference_check, Labels, ModelVector, SampleBatch, TaskSpec};
use sdfeel::runner::run_experiment;
use sdfeel::sim::{run_async, run_sync, staleness_bound, AsyncSimulation, SyncSimulation};
use sdfeel::topology::{build_mixing_matrix, spectral_gap, uniform_neighbor_matrix, Psi, StalenessVector, Topology};
use sdfeel_verify::{brute_force_max_staleness, disagreement, least_squares, second_eigenvalue_modulus};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn parse(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(text, Path::new(".")).expect("acceptance config is valid")
}

fn gaussian_model(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ModelVector {
    ModelVector::from_vec((0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

#[allow(clippy::needless_range_loop)]
fn random_topology(rng: &mut ChaCha8Rng, d: usize) -> Topology {
    if d == 1 {
        return Topology::single();
    }
    let mut adj = vec![vec![false; d]; d];
    for i in 1..d {
        let j = rng.random_range(0..i);
        adj[i][j] = true;
        adj[j][i] = true;
    }
    let extra: f64 = rng.random_range(0.0..0.6);
    for i in 0..d {
        for j in i + 1..d {
            if rng.random_bool(extra) {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
    }
    let neighbors = adj.iter().map(|row| (0..d).filter(|&j| row[j]).collect()).collect();
    Topology::from_neighbors(neighbors).expect("spanning tree keeps the graph connected")
}

fn c1_mixing_properties() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_col = 0.0_f64;
    let mut worst_asym = 0.0_f64;
    for draw in 0..1000 {
        let d = rng.random_range(1..=10);
        let topo = random_topology(&mut rng, d);
        let trigger = rng.random_range(0..d);
        let staleness: Vec<u64> = (0..d).map(|_| rng.random_range(0..=20)).collect();
        let p = build_mixing_matrix(
            trigger,
            &topo,
            &StalenessVector::from_staleness(&staleness, 20),
            &Psi::Harmonic,
        );
        for i in 0..d {
            for j in 0..d {
                ensure(p.get(i, j) >= 0.0, || format!("draw {draw}: negative entry p({i},{j})"))?;
                worst_asym = worst_asym.max((p.get(i, j) - p.get(j, i)).abs());
            }
            worst_col = worst_col.max((p.column_sum(i) - 1.0).abs());
        }
    }
    ensure(worst_col <= 1e-12, || format!("column sum error {worst_col:e}"))?;
    ensure(worst_asym <= 1e-12, || format!("asymmetry {worst_asym:e}"))?;

    // Line graph 0 - 1 - 2, trigger 1, staleness (1, 0, 2).
    let line = Topology::from_neighbors(vec![vec![1], vec![0, 2], vec![1]]).unwrap();
    let p = build_mixing_matrix(
        1,
        &line,
        &StalenessVector::from_staleness(&[1, 0, 2], 5),
        &Psi::Harmonic,
    );
    let expected = [
        [8.0 / 11.0, 3.0 / 11.0, 0.0],
        [3.0 / 11.0, 6.0 / 11.0, 2.0 / 11.0],
        [0.0, 2.0 / 11.0, 9.0 / 11.0],
    ];
    for (i, row) in expected.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            ensure((p.get(i, j) - e).abs() <= f64::EPSILON, || {
                format!("worked example p({i},{j}) = {} vs {e}", p.get(i, j))
            })?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 draws, column error {worst_col:.1e}, asymmetry {worst_asym:.1e}, worked example exact, {elapsed:.2?}"
    ))
}

fn quadratic_shard(rng: &mut ChaCha8Rng, client_id: usize, n: usize, dim: usize) -> ClientShard {
    let xs: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    let bs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ClientShard {
        client_id,
        indices: (0..n).collect(),
        samples: SampleBatch::new(xs, dim, Labels::Real(bs)).unwrap(),
    }
}

fn c2_delta_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let task = TaskSpec::quadratic(4, 0.0);
    let mut worst_disp = 0.0_f64;
    let mut worst_grad = 0.0_f64;
    for trial in 0..50 {
        let shard = quadratic_shard(&mut rng, 0, 40, 4);
        let start = gaussian_model(&mut rng, 4, 1.0);
        let tau = rng.random_range(1..=30);
        let mut sampler = BatchSampler::new(40, trial, 0);
        let upd = local_update(0, &mut sampler, &start, tau, 0.02, 8, &task, &shard, 0).map_err(|e| e.to_string())?;
        let t = f64::from(tau);
        for j in 0..4 {
            let exact = (upd.end_model[j] - start[j]) / t;
            ensure(upd.delta[j].to_bits() == exact.to_bits(), || {
                format!("trial {trial}: Δ[{j}] is not (w_end − w_start)/τ")
            })?;
            let scale = 1.0_f64.max(upd.end_model[j].abs()).max(start[j].abs());
            worst_disp = worst_disp.max((t * upd.delta[j] - (upd.end_model[j] - start[j])).abs() / scale);
            worst_grad = worst_grad.max((upd.delta[j] + 0.02 / t * upd.grad_sum[j]).abs() / scale);
        }
    }
    ensure(worst_disp <= 4.0 * f64::EPSILON, || {
        format!("τΔ displacement error {worst_disp:e}")
    })?;
    ensure(worst_grad <= 1e-12, || format!("Δ vs −(η/τ)Σg error {worst_grad:e}"))?;

    // Two clients with equal weight, τ = (2, 4): ŷ = y + 3·(u + v)/2.
    let y = ModelVector::from_vec(vec![0.3, -1.2, 2.5]);
    let u = ModelVector::from_vec(vec![0.1, 0.2, -0.4]);
    let v = ModelVector::from_vec(vec![-0.7, 0.05, 0.9]);
    let weights = compute_weights(&[10, 10], &[0, 0], 1).unwrap();
    let cluster = ClusterState {
        cluster_id: 0,
        model: y.clone(),
        broadcast_model: y.clone(),
        deadline: 1.0,
        clients: vec![0, 1],
        last_broadcast_k: 0,
    };
    let mk = |client_id, tau, d: &ModelVector| UpdateDelta {
        client_id,
        delta: d.clone(),
        tau,
        grad_sum: ModelVector::zeros(3),
        end_model: ModelVector::zeros(3),
    };
    let agg = intra_aggregate(&cluster, &[mk(0, 2, &u), mk(1, 4, &v)], &weights, Default::default())
        .map_err(|e| e.to_string())?;
    ensure((agg.tau_bar - 3.0).abs() <= 1e-12, || format!("τ̄ = {}", agg.tau_bar))?;
    let mut expect = y.clone();
    expect.axpy(1.5, &u);
    expect.axpy(1.5, &v);
    let err = agg.model.distance(&expect);
    ensure(err <= 1e-12, || format!("two-client example off by {err:e}"))?;
    Ok(format!(
        "Δ bit-exact over 50 updates, τΔ error {worst_disp:.1e}, gradient form {worst_grad:.1e}; τ̄ = 3 example error {err:.1e}"
    ))
}

fn c3_auxiliary_recursion() -> Outcome {
    let cfg = parse(
        "clusters = 4\nclients_per_cluster = 2\ntask.kind = quadratic\ntask.feature_dim = 5\n\
         data.num_samples = 400\ndata.partition = iid\ntrain.eta = 0.01\ntrain.batch_size = 5\n\
         train.beta = 2\nspeeds.gap = 3\ncluster.t_comp_s = 1,1.7,2.3,3.1\n\
         init.scale = 1\nstop.max_global_iters = 200\nseed = 3\n",
    );
    let exp = cfg.build_experiment().map_err(|e| e.to_string())?;
    ensure(exp.weights.is_uniform(1e-15), || {
        "cluster weights are not uniform".into()
    })?;
    let mut sim = AsyncSimulation::new(&exp).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    let mut stale_seen = 0;
    for _ in 0..200 {
        let before = auxiliary_global(&sim.federation().models(), &exp.weights);
        let rep = sim.step().map_err(|e| e.to_string())?;
        let after = auxiliary_global(&sim.federation().models(), &exp.weights);
        let d = rep.log.trigger;
        let mut predicted = before;
        predicted.axpy(
            -exp.params.eta * exp.weights.m_tilde[d] * rep.log.tau_bar,
            &rep.log.grad_term,
        );
        let rel = predicted.distance(&after) / after.norm().max(1e-300);
        worst = worst.max(rel);
        stale_seen = stale_seen.max(rep.log.max_staleness);
    }
    ensure(worst <= 1e-9, || format!("relative recursion error {worst:e}"))?;
    Ok(format!(
        "200 iterations, worst relative error {worst:.1e}, max staleness {stale_seen}"
    ))
}

fn c4_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logistic = TaskSpec::logistic(6, 4, 0.01);
    let quadratic = TaskSpec::quadratic(6, 0.01);
    let ldata = synthesize_dataset(&logistic, 60, 4, 1.0, 4).map_err(|e| e.to_string())?;
    let qdata = synthesize_dataset(&quadratic, 60, 3, 0.5, 4).map_err(|e| e.to_string())?;
    let (mut wl, mut wq) = (0.0_f64, 0.0_f64);
    for _ in 0..50 {
        let ml = gaussian_model(&mut rng, logistic.param_count(), 1.0);
        let mq = gaussian_model(&mut rng, quadratic.param_count(), 1.0);
        wl = wl.max(finite_difference_check(&logistic, &ml, &ldata.samples, 1e-5).map_err(|e| e.to_string())?);
        wq = wq.max(finite_difference_check(&quadratic, &mq, &qdata.samples, 1e-5).map_err(|e| e.to_string())?);
    }
    ensure(wl < 1e-4, || format!("logistic deviation {wl:e}"))?;
    ensure(wq < 1e-6, || format!("quadratic deviation {wq:e}"))?;
    Ok(format!("50 points: logistic {wl:.1e}, quadratic {wq:.1e}"))
}

fn c5_convergence() -> Outcome {
    let start = Instant::now();
    let cfg = parse(
        "clusters = 3\nclients_per_cluster = 3\ntask.kind = quadratic\ntask.feature_dim = 5\n\
         data.num_samples = 450\ndata.noise = 0\ntrain.eta = 0.001\ntrain.batch_size = 1000\n\
         train.beta = 2\nspeeds.h_min = 1\nspeeds.gap = 5\nstop.max_global_iters = 10000\nseed = 3\n",
    );
    let exp = cfg.build_experiment().map_err(|e| e.to_string())?;
    let bound = sdfeel::runner::evaluate_bound(&cfg).map_err(|e| e.to_string())?;
    ensure(bound.report.feasible, || format!("η not feasible: {:?}", bound.report))?;
    let res = run_async(&exp, &cfg.stop).map_err(|f| f.to_string())?;
    let oracle = least_squares(&exp.train.samples, 0.0);
    let dist_last = auxiliary_global(&res.models, &exp.weights).distance(&oracle);
    let dist_out = res.consensus.output.distance(&oracle);
    let k = res.trace.last().unwrap().k;
    let elapsed = start.elapsed();
    ensure(k <= 10_000, || format!("ran {k} iterations"))?;
    ensure(dist_last < 1e-3, || format!("‖ȳ − w*‖ = {dist_last:e}"))?;
    ensure(dist_out < 1e-3, || format!("consensus output off by {dist_out:e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "K = {k}, ‖ȳ − w*‖ = {dist_last:.1e}, consensus output {dist_out:.1e}, {elapsed:.2?}"
    ))
}

fn c6_staleness(traces: &[(String, usize, f64, f64, Vec<MetricsRecord>)]) -> Outcome {
    let mut checked = Vec::new();
    for (name, d, lo, hi, trace) in traces {
        let observed = trace.iter().map(|r| r.max_staleness).max().unwrap_or(0);
        let bound = staleness_bound(*d, *lo, *hi);
        ensure(observed <= bound, || {
            format!("{name}: observed {observed} > bound {bound}")
        })?;
        checked.push(format!("{name} {observed}/{bound}"));
    }

    // Ratio 5 with exact latencies 3 s and 15 s.
    let mut worst_sim = 0;
    for slow_first in [false, true] {
        let t_comp = if slow_first { "13,1" } else { "1,13" };
        let cfg = parse(&format!(
            "clusters = 2\nclients_per_cluster = 1\ntask.kind = quadratic\ntask.feature_dim = 2\n\
             data.num_samples = 20\ntrain.eta = 0.01\ncluster.t_comp_s = {t_comp}\nlatency.model_bits = 1000000\n\
             latency.rate_client_server_bps = 1000000\nlatency.rate_server_server_bps = 1000000\n\
             stop.max_sim_time_s = 600\n"
        ));
        let exp = cfg.build_experiment().map_err(|e| e.to_string())?;
        let lat = exp.iteration_latencies().map_err(|e| e.to_string())?;
        let res = run_async(&exp, &cfg.stop).map_err(|f| f.to_string())?;
        let observed = res.trace.iter().map(|r| r.max_staleness).max().unwrap_or(0);
        let periods = if slow_first { [5, 1] } else { [1, 5] };
        let brute = brute_force_max_staleness(&periods, 200);
        ensure(observed == brute, || {
            format!("ratio 5: simulator {observed} vs brute force {brute}")
        })?;
        let bound = staleness_bound(2, lat[0].min(lat[1]), lat[0].max(lat[1]));
        ensure(bound == 6 && observed <= bound, || {
            format!("ratio 5: observed {observed}, bound {bound}")
        })?;
        worst_sim = worst_sim.max(observed);
    }
    Ok(format!(
        "{}; D = 2 ratio 5: δ_max = {worst_sim} = brute force, bound 6",
        checked.join(", ")
    ))
}

fn trend_config(h: u32) -> ExperimentConfig {
    parse(&format!(
        "clusters = 6\nclients_per_cluster = 5\ntask.kind = logistic\ntask.feature_dim = 10\ntask.num_classes = 10\n\
         data.num_samples = 3000\ndata.alpha = 0.5\ntrain.eta = 0.01\ntrain.batch_size = 10\n\
         speeds.h_min = 1\ntrain.beta = 2\nspeeds.gap = {h}\nstop.target_loss = 0.8\nstop.max_global_iters = 4000\nseed = 1\n"
    ))
}

fn c7_trend(traces: &mut Vec<(String, usize, f64, f64, Vec<MetricsRecord>)>) -> Outcome {
    let start = Instant::now();
    let mut speedups = Vec::new();
    for h in [5, 10, 30] {
        let cfg = trend_config(h);
        let exp = cfg.build_experiment().map_err(|e| e.to_string())?;
        let a = run_async(&exp, &cfg.stop).map_err(|f| f.to_string())?;
        let s = run_sync(&exp, &cfg.stop).map_err(|f| f.to_string())?;
        let ta = time_to_target(&a.trace, 0.8).ok_or_else(|| format!("H = {h}: async never reached the target"))?;
        let ts = time_to_target(&s.trace, 0.8).ok_or_else(|| format!("H = {h}: sync never reached the target"))?;
        ensure(ta < ts, || format!("H = {h}: async {ta} ≥ sync {ts}"))?;
        speedups.push((h, ts / ta));
        traces.push((format!("trend H={h}"), 6, a.latency_range.0, a.latency_range.1, a.trace));
    }
    ensure(speedups[2].1 > speedups[0].1, || format!("speedups {speedups:?}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    let list: Vec<String> = speedups.iter().map(|(h, r)| format!("H={h}: {r:.2}x")).collect();
    Ok(format!(
        "sync/async time to loss 0.8: {}, {elapsed:.2?}",
        list.join(", ")
    ))
}

fn c8_sync_equivalence() -> Outcome {
    let mut lines = Vec::new();
    let mut failed = false;
    for d in [1usize, 2, 3] {
        let cfg = parse(&format!(
            "clusters = {d}\nclients_per_cluster = 2\ntask.kind = quadratic\ntask.feature_dim = 3\n\
             data.num_samples = 120\ntrain.eta = 0.01\ntrain.batch_size = 5\ntrain.beta = 3\n\
             speeds.gap = 1\ncluster.t_comp_s = 1\ninit.scale = 1\nstop.max_global_iters = 1000\nseed = 8\n"
        ));
        let exp = cfg.build_experiment().map_err(|e| e.to_string())?;
        let mut a = AsyncSimulation::new(&exp).map_err(|e| e.to_string())?;
        let mut s = SyncSimulation::new(&exp).map_err(|e| e.to_string())?;
        let mut first_mismatch = None;
        let mut worst = 0.0_f64;
        for round in 1..=20 {
            for _ in 0..d {
                a.step().map_err(|e| e.to_string())?;
            }
            s.step().map_err(|e| e.to_string())?;
            let (ma, ms) = (a.federation().models(), s.federation().models());
            for (x, y) in ma.iter().zip(&ms) {
                worst = worst.max(x.distance(y));
                if x.as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .any(|(p, q)| p.to_bits() != q.to_bits())
                    && first_mismatch.is_none()
                {
                    first_mismatch = Some(round);
                }
            }
        }
        match first_mismatch {
            None => lines.push(format!("D={d} identical")),
            Some(r) => {
                failed = true;
                lines.push(format!("D={d} differs from round {r} (max distance {worst:.1e})"));
            }
        }
    }
    if failed {
        Err(lines.join(", "))
    } else {
        Ok(lines.join(", "))
    }
}

fn c9_consensus() -> Outcome {
    let topo = Topology::ring(6).unwrap();
    let w = uniform_neighbor_matrix(&topo);
    let rho = second_eigenvalue_modulus(&w);
    let ours = spectral_gap(&w).map_err(|e| e.to_string())?;
    ensure((ours - rho).abs() < 1e-12, || {
        format!("spectral gap {ours} vs dense oracle {rho}")
    })?;

    let weights = compute_weights(&[1; 6], &[0, 1, 2, 3, 4, 5], 6).unwrap();
    let mut worst_ratio = 0.0_f64;
    let mut worst_l2_ratio = 0.0_f64;
    let mut worst_rounds = 0;
    let mut worst_drift = 0.0_f64;
    let mut violations = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let models: Vec<ModelVector> = (0..6).map(|_| gaussian_model(&mut rng, 8, 10.0)).collect();
        let mean = auxiliary_global(&models, &weights);
        let out = consensus_phase(&models, &topo, &weights, 200, 1e-6);
        let ratio = out.distance_history.windows(2).map(|p| p[1] / p[0]).fold(0.0, f64::max);
        if ratio > rho + 0.05 {
            violations.push(format!("start {seed}: {ratio:.3}"));
        }
        worst_ratio = worst_ratio.max(ratio);
        ensure(out.converged && out.final_distance() < 1e-6, || {
            format!(
                "start {seed}: distance {} after {} rounds",
                out.final_distance(),
                out.rounds
            )
        })?;
        worst_rounds = worst_rounds.max(out.rounds);
        worst_drift = worst_drift.max(out.output.distance(&mean));

        // Contraction of the ℓ2 disagreement over the same rounds.
        let mut current = models;
        for _ in 0..out.rounds {
            let next = mix_all(&current, &topo, &w);
            worst_l2_ratio = worst_l2_ratio.max(disagreement(&next) / disagreement(&current));
            current = next;
        }
    }
    ensure(worst_drift <= 1e-10, || format!("average moved by {worst_drift:e}"))?;
    let detail = format!(
        "ρ = {rho:.6} (dense oracle), worst per-round max-distance ratio {worst_ratio:.4}, \
         worst ℓ2-disagreement ratio {worst_l2_ratio:.4}, ≤ {worst_rounds} rounds to 1e-6, average drift {worst_drift:.1e}"
    );
    if violations.is_empty() {
        Ok(detail)
    } else {
        Err(format!(
            "{detail}; max-distance ratio above ρ + 0.05 in {}/20 starts ({})",
            violations.len(),
            violations.join(", ")
        ))
    }
}

fn bound_base() -> BoundInputs {
    BoundInputs {
        eta: 0.001,
        smoothness: 1.0,
        tau_min: 2.0,
        tau_max: 5.0,
        delta_max: 3.0,
        heterogeneity_gap: 2.0,
        sigma_sq: 1.0,
        kappa_sq: 1.0,
        rho_max: 0.5,
        client_weights: vec![0.25; 4],
        iterations: 1000.0,
        loss_gap: 1.0,
    }
}

fn c10_bound_calculator() -> Outcome {
    let base = bound_base();
    let r = theorem_bound(&base);
    ensure(r.u2 == 20.0, || format!("U₂ = {}", r.u2))?;
    ensure(r.feasible, || "base inputs should be feasible".into())?;

    // 1 − 2η²L²·20 = 0 at η = 1/√40.
    let edge = 1.0 / 40f64.sqrt();
    let below = theorem_bound(&BoundInputs {
        eta: edge * (1.0 - 1e-9),
        ..base.clone()
    });
    let above = theorem_bound(&BoundInputs {
        eta: edge * (1.0 + 1e-9),
        ..base.clone()
    });
    ensure(below.variance_condition && !above.variance_condition, || {
        format!(
            "variance flag {} / {} across the boundary",
            below.variance_condition, above.variance_condition
        )
    })?;
    ensure(!above.feasible && above.bound.is_infinite(), || {
        "infeasible side must report no bound".into()
    })?;

    type Setter = fn(&mut BoundInputs, f64);
    let grids: [(&str, Setter, [f64; 4]); 4] = [
        ("σ²", |b, v| b.sigma_sq = v, [0.1, 1.0, 5.0, 20.0]),
        ("κ²", |b, v| b.kappa_sq = v, [0.1, 1.0, 5.0, 20.0]),
        ("δ_max", |b, v| b.delta_max = v, [0.0, 2.0, 6.0, 12.0]),
        ("H", |b, v| b.heterogeneity_gap = v, [1.0, 5.0, 10.0, 30.0]),
    ];
    for (name, set, grid) in grids {
        let values: Vec<f64> = grid
            .iter()
            .map(|&v| {
                let mut inp = base.clone();
                set(&mut inp, v);
                theorem_bound(&inp).bound
            })
            .collect();
        ensure(values.windows(2).all(|w| w[1] >= w[0]), || {
            format!("{name} grid not monotone: {values:?}")
        })?;
        ensure(values[3] > values[0], || format!("{name} grid flat: {values:?}"))?;
    }
    Ok("U₂ = 20, variance flag flips at η = 1/√40, monotone in σ², κ², δ_max, H".into())
}

fn c11_determinism() -> Outcome {
    let text = "run_id = det\nmode = both\nclusters = 4\nclients_per_cluster = 3\ntask.kind = logistic\n\
                task.feature_dim = 4\ntask.num_classes = 3\ndata.num_samples = 300\ndata.test_samples = 60\n\
                train.eta = 0.05\nspeeds.gap = 7\ncluster.t_comp_s = 1,2,3,5\nlatency.jitter = 0.2\n\
                init.scale = 0.3\nstop.max_global_iters = 150\nseed = 11\n";
    let cfg = parse(text);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg, d.path()).map_err(|e| e.to_string())?;
    }
    let mut compared = 0;
    for name in [
        "det_async.csv",
        "det_sync.csv",
        "det_async_model.txt",
        "det_sync_model.txt",
        "det_summary.json",
    ] {
        let a = std::fs::read(dirs[0].path().join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between runs"))?;
        compared += 1;
    }
    // Also straight from the library, without the file layer.
    let exp = cfg.build_experiment().map_err(|e| e.to_string())?;
    let x = trace_to_csv(&run_async(&exp, &cfg.stop).map_err(|f| f.to_string())?.trace);
    let y = trace_to_csv(
        &run_async(&cfg.build_experiment().unwrap(), &cfg.stop)
            .map_err(|f| f.to_string())?
            .trace,
    );
    ensure(x == y, || "in-memory traces differ".into())?;
    Ok(format!("{compared} artifacts byte-identical across reruns (jitter on)"))
}

fn evaluate(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> (usize, bool, String) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("[{tag}] criterion {id:>2} {name}: {detail} ({:.2?})", start.elapsed());
    (id, outcome.is_ok(), line)
}

fn main() {
    // Traces reused by the staleness criterion.
    let mut traces: Vec<(String, usize, f64, f64, Vec<MetricsRecord>)> = Vec::new();
    let jitter_cfg = parse(
        "clusters = 5\nclients_per_cluster = 2\ntask.kind = quadratic\ntask.feature_dim = 3\ndata.num_samples = 200\n\
         train.eta = 0.01\nspeeds.gap = 4\ncluster.t_comp_s = 1,2.5,4,0.7,3.3\nlatency.jitter = 0.3\n\
         topology.kind = inline\ntopology.adjacency = 0: 1,2; 1: 0,3; 2: 0,3,4; 3: 1,2; 4: 2\n\
         stop.max_global_iters = 500\nseed = 6\n",
    );
    let exp = jitter_cfg.build_experiment().expect("valid");
    let res = run_async(&exp, &jitter_cfg.stop).expect("runs");
    traces.push((
        "jittered D=5".into(),
        5,
        res.latency_range.0,
        res.latency_range.1,
        res.trace,
    ));

    let mut results = vec![
        evaluate(1, "mixing-matrix properties", c1_mixing_properties),
        evaluate(2, "delta and intra-cluster identities", c2_delta_identities),
        evaluate(3, "auxiliary-model recursion", c3_auxiliary_recursion),
        evaluate(4, "gradient correctness", c4_gradients),
        evaluate(5, "convergence to the least-squares optimum", c5_convergence),
        // Runs before 6 so its traces are checked too.
        evaluate(7, "async advantage grows with heterogeneity", || c7_trend(&mut traces)),
    ];
    results.push(evaluate(6, "staleness bound", || c6_staleness(&traces)));
    results.push(evaluate(8, "sync/async equivalence at H = 1", c8_sync_equivalence));
    results.push(evaluate(9, "consensus phase", c9_consensus));
    results.push(evaluate(10, "convergence-bound calculator", c10_bound_calculator));
    results.push(evaluate(11, "determinism", c11_determinism));
    results.sort_by_key(|r| r.0);

    for (_, _, line) in &results {
        println!("{line}");
    }
    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
