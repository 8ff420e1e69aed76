//! Experiment configuration: a flat, line-oriented `key = value` format with
//! dotted section prefixes, e.g.
//!
//! ```text
//! # six clusters on a ring
//! clusters = 6
//! clients_per_cluster = 5
//! task.kind = logistic
//! latency.rate_client_server_bps = 5000000
//! stop.max_global_iters = 2000
//! ```
//!
//! `#` starts a comment. Unknown and repeated keys are rejected. Every value
//! is validated before anything runs, and [`ExperimentConfig::to_text`]
//! writes the fully resolved configuration back out in the same format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{compute_shard_weights, dirichlet_partition, iid_partition, synthesize_with_holdout};
use crate::engine::{IntraBase, ProtocolParams};
use crate::error::{Error, Result};
use crate::metrics::TraceFormat;
use crate::model::{ModelVector, TaskKind, TaskSpec};
use crate::sim::{
    deadline_for_min_batches, epochs_for, ConsensusSettings, Experiment, LatencyParams, Mode, StopCriteria,
};
use crate::topology::{Psi, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Async,
    Sync,
    Both,
}

impl RunMode {
    pub fn modes(&self) -> &'static [Mode] {
        match self {
            RunMode::Async => &[Mode::Async],
            RunMode::Sync => &[Mode::Sync],
            RunMode::Both => &[Mode::Async, Mode::Sync],
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "async" => Ok(RunMode::Async),
            "sync" => Ok(RunMode::Sync),
            "both" => Ok(RunMode::Both),
            _ => Err(Error::config(
                "mode",
                format!("expected async, sync or both, got `{s}`"),
            )),
        }
    }
}

impl RunMode {
    fn as_str(&self) -> &'static str {
        match self {
            RunMode::Async => "async",
            RunMode::Sync => "sync",
            RunMode::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Ring,
    /// Adjacency list text, one `d: j1,j2,...` line per server.
    Adjacency(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpeedSpec {
    /// Speeds geometrically spaced from `h_min` to `gap · h_min` over all
    /// clients in index order.
    Geometric {
        h_min: f64,
        gap: f64,
    },
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeadlineSpec {
    /// One value for every cluster, or one per cluster.
    Fixed(Vec<f64>),
    /// Enough time for the slowest client of each cluster to process
    /// `min_batches` mini-batches.
    MinBatches(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Dirichlet,
    Iid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub num_samples: usize,
    pub test_samples: usize,
    pub num_classes: usize,
    pub alpha: f64,
    pub noise: f64,
    pub partition: PartitionKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySpec {
    /// Defaults to 32 bits per model parameter.
    pub model_bits: Option<f64>,
    pub rate_client_server: f64,
    pub rate_server_server: f64,
    pub flops_per_epoch: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub mode: RunMode,
    pub seed: u64,
    pub clusters: usize,
    pub clients_per_cluster: usize,
    pub topology: TopologySpec,
    pub speeds: SpeedSpec,
    pub deadlines: DeadlineSpec,
    pub beta: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub intra_base: IntraBase,
    pub task: TaskSpec,
    pub data: DataSpec,
    pub latency: LatencySpec,
    pub psi: Psi,
    pub stop: StopCriteria,
    pub consensus: ConsensusSettings,
    /// Standard deviation of the Gaussian initial model; 0 starts at zero.
    pub init_scale: f64,
    pub out_dir: Option<PathBuf>,
    pub trace_format: TraceFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "run".into(),
            mode: RunMode::Async,
            seed: 0,
            clusters: 6,
            clients_per_cluster: 5,
            topology: TopologySpec::Ring,
            speeds: SpeedSpec::Geometric { h_min: 1.0, gap: 1.0 },
            deadlines: DeadlineSpec::Fixed(vec![1.0]),
            beta: 1.0,
            eta: 0.001,
            batch_size: 10,
            intra_base: IntraBase::Current,
            task: TaskSpec::logistic(10, 10, 0.0),
            data: DataSpec {
                num_samples: 3000,
                test_samples: 0,
                num_classes: 10,
                alpha: 0.5,
                noise: 1.0,
                partition: PartitionKind::Dirichlet,
            },
            latency: LatencySpec {
                model_bits: None,
                rate_client_server: 5e6,
                rate_server_server: 10e6,
                flops_per_epoch: 1.0,
                jitter: 0.0,
            },
            psi: Psi::Harmonic,
            stop: StopCriteria::default(),
            consensus: ConsensusSettings::default(),
            init_scale: 0.0,
            out_dir: None,
            trace_format: TraceFormat::Csv,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "run_id",
    "mode",
    "seed",
    "clusters",
    "clients_per_cluster",
    "topology.kind",
    "topology.file",
    "topology.adjacency",
    "speeds.h_min",
    "speeds.gap",
    "speeds.list",
    "cluster.t_comp_s",
    "cluster.min_batches",
    "train.beta",
    "train.eta",
    "train.batch_size",
    "train.intra_base",
    "task.kind",
    "task.feature_dim",
    "task.num_classes",
    "task.regularization",
    "data.num_samples",
    "data.test_samples",
    "data.num_classes",
    "data.alpha",
    "data.noise",
    "data.partition",
    "latency.model_bits",
    "latency.rate_client_server_bps",
    "latency.rate_server_server_bps",
    "latency.flops_per_epoch",
    "latency.jitter",
    "psi.kind",
    "psi.value",
    "stop.max_sim_time_s",
    "stop.max_global_iters",
    "stop.target_loss",
    "consensus.max_rounds",
    "consensus.tol",
    "init.scale",
    "out.dir",
    "out.format",
];

const REQUIRED_KEYS: &[&str] = &[
    "clusters",
    "clients_per_cluster",
    "task.kind",
    "task.feature_dim",
    "train.eta",
    "data.num_samples",
];

fn normalize_adjacency(text: &str) -> String {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

struct Entries {
    map: BTreeMap<String, String>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{raw}`"))),
        }
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(key, format!("cannot parse `{s}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

fn parse_entries(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config_msg(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::config(key, "key given more than once"));
        }
    }
    Ok(Entries { map })
}

impl ExperimentConfig {
    /// Parse and validate. Relative `topology.file` paths resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut e = parse_entries(text)?;
        for key in REQUIRED_KEYS {
            if !e.map.contains_key(*key) {
                return Err(Error::config(*key, "required key is missing"));
            }
        }
        let mut cfg = ExperimentConfig::default();

        if let Some(v) = e.take("run_id") {
            cfg.run_id = v;
        }
        if let Some(v) = e.take("mode") {
            cfg.mode = v.parse()?;
        }
        cfg.seed = e.parse("seed")?.unwrap_or(cfg.seed);
        cfg.clusters = e.parse("clusters")?.unwrap_or(cfg.clusters);
        cfg.clients_per_cluster = e.parse("clients_per_cluster")?.unwrap_or(cfg.clients_per_cluster);

        let kind = e.take("topology.kind").unwrap_or_else(|| "ring".into());
        let file = e.take("topology.file");
        let inline = e.take("topology.adjacency");
        cfg.topology = match kind.as_str() {
            "ring" => TopologySpec::Ring,
            "file" => {
                let rel = file.ok_or_else(|| Error::config("topology.file", "required when topology.kind = file"))?;
                let path = base_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                TopologySpec::Adjacency(normalize_adjacency(&text))
            }
            "inline" => {
                let adj = inline
                    .ok_or_else(|| Error::config("topology.adjacency", "required when topology.kind = inline"))?;
                TopologySpec::Adjacency(normalize_adjacency(&adj.replace(';', "\n")))
            }
            other => {
                return Err(Error::config(
                    "topology.kind",
                    format!("expected ring, file or inline, got `{other}`"),
                ))
            }
        };

        let h_min = e.parse("speeds.h_min")?;
        let gap = e.parse("speeds.gap")?;
        cfg.speeds = match e.list("speeds.list")? {
            Some(list) => {
                if h_min.is_some() || gap.is_some() {
                    return Err(Error::config(
                        "speeds.list",
                        "cannot be combined with speeds.h_min or speeds.gap",
                    ));
                }
                SpeedSpec::List(list)
            }
            None => SpeedSpec::Geometric {
                h_min: h_min.unwrap_or(1.0),
                gap: gap.unwrap_or(1.0),
            },
        };

        let min_batches: Option<u32> = e.parse("cluster.min_batches")?;
        cfg.deadlines = match e.take("cluster.t_comp_s") {
            Some(v) if v == "auto" => DeadlineSpec::MinBatches(min_batches.unwrap_or(100)),
            Some(v) => {
                if min_batches.is_some() {
                    return Err(Error::config(
                        "cluster.min_batches",
                        "only used with cluster.t_comp_s = auto",
                    ));
                }
                let mut tmp = Entries {
                    map: BTreeMap::from([("cluster.t_comp_s".to_string(), v)]),
                };
                DeadlineSpec::Fixed(tmp.list("cluster.t_comp_s")?.unwrap_or_default())
            }
            None => match min_batches {
                Some(_) => {
                    return Err(Error::config(
                        "cluster.min_batches",
                        "only used with cluster.t_comp_s = auto",
                    ))
                }
                None => cfg.deadlines.clone(),
            },
        };

        cfg.beta = e.parse("train.beta")?.unwrap_or(cfg.beta);
        cfg.eta = e.parse("train.eta")?.unwrap_or(cfg.eta);
        cfg.batch_size = e.parse("train.batch_size")?.unwrap_or(cfg.batch_size);
        if let Some(v) = e.take("train.intra_base") {
            cfg.intra_base = match v.as_str() {
                "current" => IntraBase::Current,
                "broadcast" => IntraBase::Broadcast,
                _ => return Err(Error::config("train.intra_base", "expected current or broadcast")),
            };
        }

        let kind = match e.take("task.kind").as_deref() {
            Some("quadratic") => TaskKind::Quadratic,
            Some("logistic") => TaskKind::Logistic,
            Some(other) => {
                return Err(Error::config(
                    "task.kind",
                    format!("expected quadratic or logistic, got `{other}`"),
                ))
            }
            None => unreachable!("required key checked above"),
        };
        let feature_dim = e.parse("task.feature_dim")?.unwrap_or(0);
        let task_classes: Option<usize> = e.parse("task.num_classes")?;
        let regularization = e.parse("task.regularization")?.unwrap_or(0.0);
        cfg.task = match kind {
            TaskKind::Quadratic => {
                if task_classes.is_some() {
                    return Err(Error::config(
                        "task.num_classes",
                        "only meaningful for the logistic task",
                    ));
                }
                TaskSpec::quadratic(feature_dim, regularization)
            }
            TaskKind::Logistic => TaskSpec::logistic(feature_dim, task_classes.unwrap_or(2), regularization),
        };

        cfg.data = DataSpec {
            num_samples: e.parse("data.num_samples")?.unwrap_or(0),
            test_samples: e.parse("data.test_samples")?.unwrap_or(0),
            num_classes: e.parse("data.num_classes")?.unwrap_or(match kind {
                TaskKind::Quadratic => 1,
                TaskKind::Logistic => cfg.task.num_classes,
            }),
            alpha: e.parse("data.alpha")?.unwrap_or(0.5),
            noise: e.parse("data.noise")?.unwrap_or(match kind {
                TaskKind::Quadratic => 0.1,
                TaskKind::Logistic => 1.0,
            }),
            partition: match e.take("data.partition").as_deref() {
                None | Some("dirichlet") => PartitionKind::Dirichlet,
                Some("iid") => PartitionKind::Iid,
                Some(_) => return Err(Error::config("data.partition", "expected dirichlet or iid")),
            },
        };

        cfg.latency = LatencySpec {
            model_bits: e.parse("latency.model_bits")?,
            rate_client_server: e
                .parse("latency.rate_client_server_bps")?
                .unwrap_or(cfg.latency.rate_client_server),
            rate_server_server: e
                .parse("latency.rate_server_server_bps")?
                .unwrap_or(cfg.latency.rate_server_server),
            flops_per_epoch: e
                .parse("latency.flops_per_epoch")?
                .unwrap_or(cfg.latency.flops_per_epoch),
            jitter: e.parse("latency.jitter")?.unwrap_or(0.0),
        };

        let psi_value: Option<f64> = e.parse("psi.value")?;
        cfg.psi = match e.take("psi.kind").as_deref() {
            None | Some("harmonic") => {
                if psi_value.is_some() {
                    return Err(Error::config("psi.value", "only used with psi.kind = constant"));
                }
                Psi::Harmonic
            }
            Some("constant") => {
                Psi::Constant(psi_value.ok_or_else(|| Error::config("psi.value", "required when psi.kind = constant"))?)
            }
            Some(_) => return Err(Error::config("psi.kind", "expected harmonic or constant")),
        };

        cfg.stop = StopCriteria {
            max_sim_time: e.parse("stop.max_sim_time_s")?,
            max_global_iters: e.parse("stop.max_global_iters")?,
            target_loss: e.parse("stop.target_loss")?,
        };
        cfg.consensus = ConsensusSettings {
            max_rounds: e.parse("consensus.max_rounds")?.unwrap_or(cfg.consensus.max_rounds),
            tol: e.parse("consensus.tol")?.unwrap_or(cfg.consensus.tol),
        };
        cfg.init_scale = e.parse("init.scale")?.unwrap_or(0.0);
        cfg.out_dir = e.take("out.dir").map(PathBuf::from);
        cfg.trace_format = match e.take("out.format").as_deref() {
            None | Some("csv") => TraceFormat::Csv,
            Some("jsonl") => TraceFormat::Jsonl,
            Some(_) => return Err(Error::config("out.format", "expected csv or jsonl")),
        };

        debug_assert!(e.map.is_empty(), "unconsumed keys: {:?}", e.map.keys());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        ExperimentConfig::parse(&text, base)
    }

    pub fn num_clients(&self) -> usize {
        self.clusters * self.clients_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, "must be positive and finite"))
            }
        };
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config("run_id", "must be a nonempty file-name component"));
        }
        if self.clusters == 0 {
            return Err(Error::config("clusters", "must be at least 1"));
        }
        if self.clients_per_cluster == 0 {
            return Err(Error::config("clients_per_cluster", "must be at least 1"));
        }
        self.build_topology()?;
        match &self.speeds {
            SpeedSpec::Geometric { h_min, gap } => {
                positive("speeds.h_min", *h_min)?;
                if !(*gap >= 1.0 && gap.is_finite()) {
                    return Err(Error::config("speeds.gap", "heterogeneity gap must be at least 1"));
                }
            }
            SpeedSpec::List(list) => {
                if list.len() != self.num_clients() {
                    return Err(Error::config(
                        "speeds.list",
                        format!("expected {} speeds, got {}", self.num_clients(), list.len()),
                    ));
                }
                for &h in list {
                    positive("speeds.list", h)?;
                }
            }
        }
        match &self.deadlines {
            DeadlineSpec::Fixed(list) => {
                if list.len() != 1 && list.len() != self.clusters {
                    return Err(Error::config("cluster.t_comp_s", "give one value or one per cluster"));
                }
                for &t in list {
                    positive("cluster.t_comp_s", t)?;
                }
            }
            DeadlineSpec::MinBatches(n) => {
                if *n == 0 {
                    return Err(Error::config("cluster.min_batches", "must be at least 1"));
                }
            }
        }
        positive("train.beta", self.beta)?;
        positive("train.eta", self.eta)?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        self.task.validate()?;
        if self.data.num_samples < self.num_clients() {
            return Err(Error::config("data.num_samples", "fewer samples than clients"));
        }
        if self.task.kind == TaskKind::Logistic && self.data.num_classes != self.task.num_classes {
            return Err(Error::config(
                "data.num_classes",
                "must equal task.num_classes for the logistic task",
            ));
        }
        if self.data.num_classes == 0 {
            return Err(Error::config("data.num_classes", "must be positive"));
        }
        positive("data.alpha", self.data.alpha)?;
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be finite and nonnegative"));
        }
        if let Some(bits) = self.latency.model_bits {
            positive("latency.model_bits", bits)?;
        }
        positive("latency.rate_client_server_bps", self.latency.rate_client_server)?;
        positive("latency.rate_server_server_bps", self.latency.rate_server_server)?;
        positive("latency.flops_per_epoch", self.latency.flops_per_epoch)?;
        if !(self.latency.jitter >= 0.0 && self.latency.jitter < 1.0) {
            return Err(Error::config("latency.jitter", "must lie in [0, 1)"));
        }
        self.psi.validate()?;
        if self.stop.is_unbounded() {
            return Err(Error::config(
                "stop",
                "set at least one of stop.max_sim_time_s, stop.max_global_iters, stop.target_loss",
            ));
        }
        if let Some(t) = self.stop.max_sim_time {
            positive("stop.max_sim_time_s", t)?;
        }
        if let Some(t) = self.stop.target_loss {
            if !t.is_finite() {
                return Err(Error::config("stop.target_loss", "must be finite"));
            }
        }
        positive("consensus.tol", self.consensus.tol)?;
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init.scale", "must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology> {
        let topo = match &self.topology {
            TopologySpec::Ring if self.clusters == 1 => Topology::single(),
            TopologySpec::Ring => Topology::ring(self.clusters)?,
            TopologySpec::Adjacency(text) => Topology::parse_adjacency_list(text)?,
        };
        if topo.num_servers() != self.clusters {
            return Err(Error::config(
                "topology.adjacency",
                format!(
                    "describes {} servers but clusters = {}",
                    topo.num_servers(),
                    self.clusters
                ),
            ));
        }
        Ok(topo)
    }

    /// Client speeds in client-index order.
    pub fn client_speeds(&self) -> Vec<f64> {
        match &self.speeds {
            SpeedSpec::List(list) => list.clone(),
            SpeedSpec::Geometric { h_min, gap } => {
                let n = self.num_clients();
                (0..n)
                    .map(|c| {
                        if n == 1 {
                            *h_min
                        } else {
                            h_min * gap.powf(c as f64 / (n - 1) as f64)
                        }
                    })
                    .collect()
            }
        }
    }

    /// Client `c` belongs to cluster `c mod D`.
    pub fn assignment(&self) -> Vec<usize> {
        (0..self.num_clients()).map(|c| c % self.clusters).collect()
    }

    /// Resolved computation deadlines, one per cluster.
    pub fn cluster_deadlines(&self) -> Result<Vec<f64>> {
        match &self.deadlines {
            DeadlineSpec::Fixed(list) if list.len() == 1 => Ok(vec![list[0]; self.clusters]),
            DeadlineSpec::Fixed(list) => Ok(list.clone()),
            DeadlineSpec::MinBatches(n) => {
                let speeds = self.client_speeds();
                let assignment = self.assignment();
                (0..self.clusters)
                    .map(|d| {
                        let members: Vec<f64> = speeds
                            .iter()
                            .zip(&assignment)
                            .filter(|(_, &a)| a == d)
                            .map(|(&h, _)| h)
                            .collect();
                        deadline_for_min_batches(&members, self.latency.flops_per_epoch, *n)
                    })
                    .collect()
            }
        }
    }

    /// Serialize every setting, defaults included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        kv("run_id", self.run_id.clone());
        kv("mode", self.mode.as_str().into());
        kv("seed", self.seed.to_string());
        kv("clusters", self.clusters.to_string());
        kv("clients_per_cluster", self.clients_per_cluster.to_string());
        match &self.topology {
            TopologySpec::Ring => kv("topology.kind", "ring".into()),
            TopologySpec::Adjacency(text) => {
                kv("topology.kind", "inline".into());
                let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
                kv("topology.adjacency", lines.join("; "));
            }
        }
        match &self.speeds {
            SpeedSpec::Geometric { h_min, gap } => {
                kv("speeds.h_min", h_min.to_string());
                kv("speeds.gap", gap.to_string());
            }
            SpeedSpec::List(list) => kv("speeds.list", join(list)),
        }
        match &self.deadlines {
            DeadlineSpec::Fixed(list) => kv("cluster.t_comp_s", join(list)),
            DeadlineSpec::MinBatches(n) => {
                kv("cluster.t_comp_s", "auto".into());
                kv("cluster.min_batches", n.to_string());
            }
        }
        kv("train.beta", self.beta.to_string());
        kv("train.eta", self.eta.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv(
            "train.intra_base",
            match self.intra_base {
                IntraBase::Current => "current",
                IntraBase::Broadcast => "broadcast",
            }
            .into(),
        );
        match self.task.kind {
            TaskKind::Quadratic => kv("task.kind", "quadratic".into()),
            TaskKind::Logistic => {
                kv("task.kind", "logistic".into());
                kv("task.num_classes", self.task.num_classes.to_string());
            }
        }
        kv("task.feature_dim", self.task.feature_dim.to_string());
        kv("task.regularization", self.task.regularization.to_string());
        kv("data.num_samples", self.data.num_samples.to_string());
        kv("data.test_samples", self.data.test_samples.to_string());
        kv("data.num_classes", self.data.num_classes.to_string());
        kv("data.alpha", self.data.alpha.to_string());
        kv("data.noise", self.data.noise.to_string());
        kv(
            "data.partition",
            match self.data.partition {
                PartitionKind::Dirichlet => "dirichlet",
                PartitionKind::Iid => "iid",
            }
            .into(),
        );
        if let Some(bits) = self.latency.model_bits {
            kv("latency.model_bits", bits.to_string());
        }
        kv(
            "latency.rate_client_server_bps",
            self.latency.rate_client_server.to_string(),
        );
        kv(
            "latency.rate_server_server_bps",
            self.latency.rate_server_server.to_string(),
        );
        kv("latency.flops_per_epoch", self.latency.flops_per_epoch.to_string());
        kv("latency.jitter", self.latency.jitter.to_string());
        match self.psi {
            Psi::Harmonic => kv("psi.kind", "harmonic".into()),
            Psi::Constant(c) => {
                kv("psi.kind", "constant".into());
                kv("psi.value", c.to_string());
            }
        }
        if let Some(v) = self.stop.max_sim_time {
            kv("stop.max_sim_time_s", v.to_string());
        }
        if let Some(v) = self.stop.max_global_iters {
            kv("stop.max_global_iters", v.to_string());
        }
        if let Some(v) = self.stop.target_loss {
            kv("stop.target_loss", v.to_string());
        }
        kv("consensus.max_rounds", self.consensus.max_rounds.to_string());
        kv("consensus.tol", self.consensus.tol.to_string());
        kv("init.scale", self.init_scale.to_string());
        if let Some(dir) = &self.out_dir {
            kv("out.dir", dir.display().to_string());
        }
        kv("out.format", self.trace_format.extension().into());
        out
    }

    pub fn model_bits(&self) -> f64 {
        self.latency.model_bits.unwrap_or(32.0 * self.task.param_count() as f64)
    }

    pub fn latency_params(&self) -> LatencyParams {
        LatencyParams {
            model_bits: self.model_bits(),
            rate_client_server: self.latency.rate_client_server,
            rate_server_server: self.latency.rate_server_server,
            flops_per_epoch: self.latency.flops_per_epoch,
            beta: self.beta,
        }
    }

    /// Generate data, partition it and assemble every fixed input of a run.
    pub fn build_experiment(&self) -> Result<Experiment> {
        self.validate()?;
        let topology = self.build_topology()?;
        let n = self.num_clients();
        let (train, test) = synthesize_with_holdout(
            &self.task,
            self.data.num_samples,
            self.data.test_samples,
            self.data.num_classes,
            self.data.noise,
            self.seed,
        )?;
        let shards = match self.data.partition {
            PartitionKind::Dirichlet => dirichlet_partition(n, self.data.alpha, &train, self.seed)?,
            PartitionKind::Iid => iid_partition(n, &train, self.seed)?,
        };
        let assignment = self.assignment();
        let weights = compute_shard_weights(&shards, &assignment, self.clusters)?;
        let speeds = self.client_speeds();
        let taus = speeds.iter().map(|&h| epochs_for(h, self.beta)).collect();
        let deadlines = self.cluster_deadlines()?;
        let latency = self.latency_params();
        latency.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        let dim = self.task.param_count();
        let initial_model = ModelVector::from_vec(
            (0..dim)
                .map(|_| self.init_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );

        Ok(Experiment {
            task: self.task,
            train,
            test,
            shards,
            assignment,
            weights,
            topology,
            speeds,
            taus,
            deadlines,
            latency,
            params: ProtocolParams {
                eta: self.eta,
                batch_size: self.batch_size,
                psi: self.psi,
                intra_base: self.intra_base,
            },
            initial_model,
            jitter: self.latency.jitter,
            consensus: self.consensus,
            seed: self.seed,
        })
    }
}
