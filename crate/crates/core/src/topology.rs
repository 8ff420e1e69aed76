//! Edge-server connectivity, staleness bookkeeping and the staleness-aware
//! mixing matrix used for inter-cluster aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Undirected, connected graph over edge servers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Build from neighbor lists. Lists must be symmetric, free of self
    /// loops and describe a connected graph.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(Error::config("clusters", "need at least one edge server"));
        }
        for (d, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n) {
                return Err(Error::config(
                    "topology",
                    format!("server {d} lists an unknown neighbor"),
                ));
            }
            if list.contains(&d) {
                return Err(Error::config(
                    "topology",
                    format!("server {d} lists itself as a neighbor"),
                ));
            }
        }
        for d in 0..n {
            for &j in &neighbors[d] {
                if !neighbors[j].contains(&d) {
                    return Err(Error::config(
                        "topology",
                        format!("adjacency is not symmetric: {d} -> {j} without {j} -> {d}"),
                    ));
                }
            }
        }
        let topo = Topology { neighbors };
        if !topo.is_connected() {
            return Err(Error::config("topology", "edge-server graph is not connected"));
        }
        Ok(topo)
    }

    /// A lone edge server with no neighbors.
    pub fn single() -> Self {
        Topology {
            neighbors: vec![Vec::new()],
        }
    }

    /// Ring over `num_servers >= 2` servers; two servers form a single edge.
    pub fn ring(num_servers: usize) -> Result<Self> {
        if num_servers < 2 {
            return Err(Error::config("clusters", "a ring needs at least two edge servers"));
        }
        let neighbors = (0..num_servers)
            .map(|d| {
                let mut n = vec![(d + 1) % num_servers, (d + num_servers - 1) % num_servers];
                n.sort_unstable();
                n.dedup();
                n
            })
            .collect();
        Topology::from_neighbors(neighbors)
    }

    /// Parse one `d: j1,j2,...` line per server. Blank lines and `#`
    /// comments are ignored; an empty right-hand side means no neighbors.
    pub fn parse_adjacency_list(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, Vec<usize>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::config("topology", format!("line {}: {msg}", lineno + 1));
            let (head, tail) = line.split_once(':').ok_or_else(|| bad("expected `d: j1,j2,...`"))?;
            let d: usize = head.trim().parse().map_err(|_| bad("server index is not an integer"))?;
            let list = tail
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|_| bad("neighbor index is not an integer")))
                .collect::<Result<Vec<_>>>()?;
            entries.push((d, list));
        }
        let n = entries.len();
        let mut neighbors = vec![None; n];
        for (d, list) in entries {
            if d >= n {
                return Err(Error::config(
                    "topology",
                    format!("server index {d} out of range 0..{n}"),
                ));
            }
            if neighbors[d].replace(list).is_some() {
                return Err(Error::config("topology", format!("server {d} listed twice")));
            }
        }
        Topology::from_neighbors(neighbors.into_iter().map(Option::unwrap_or_default).collect())
    }

    pub fn to_adjacency_list(&self) -> String {
        let mut out = String::new();
        for (d, list) in self.neighbors.iter().enumerate() {
            let joined: Vec<String> = list.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{d}: {}", joined.join(","));
        }
        out
    }

    pub fn num_servers(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, d: usize) -> &[usize] {
        &self.neighbors[d]
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn is_connected(&self) -> bool {
        let n = self.neighbors.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(d) = stack.pop() {
            for &j in &self.neighbors[d] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Iteration index at which each cluster last broadcast a fresh model to its
/// clients, together with the current global iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StalenessVector {
    pub last_broadcast: Vec<u64>,
    pub current_k: u64,
}

impl StalenessVector {
    pub fn new(num_clusters: usize) -> Self {
        StalenessVector {
            last_broadcast: vec![0; num_clusters],
            current_k: 0,
        }
    }

    /// Build directly from per-cluster staleness values at iteration
    /// `current_k` (which must be at least the largest value).
    pub fn from_staleness(staleness: &[u64], current_k: u64) -> Self {
        StalenessVector {
            last_broadcast: staleness.iter().map(|&s| current_k - s).collect(),
            current_k,
        }
    }

    pub fn staleness(&self, j: usize) -> u64 {
        self.current_k - self.last_broadcast[j]
    }

    pub fn max_staleness(&self) -> u64 {
        (0..self.last_broadcast.len())
            .map(|j| self.staleness(j))
            .max()
            .unwrap_or(0)
    }
}

/// Staleness discount ψ. Must be positive and non-increasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Psi {
    /// ψ(δ) = 1 / (2(δ + 1))
    #[default]
    Harmonic,
    /// ψ(δ) = c, staleness ignored.
    Constant(f64),
}

impl Psi {
    pub fn eval(&self, delta: u64) -> f64 {
        match *self {
            Psi::Harmonic => 1.0 / (2.0 * (delta as f64 + 1.0)),
            Psi::Constant(c) => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Psi::Constant(c) if !(c > 0.0 && c.is_finite()) => {
                Err(Error::config("psi.value", "constant psi must be positive and finite"))
            }
            _ => Ok(()),
        }
    }
}

/// `D x D` mixing weights. `get(i, j)` is the weight of source `i` in the
/// new model of destination `j`, so columns sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl MixingMatrix {
    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        MixingMatrix { n, entries }
    }

    pub fn from_rows(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                actual: entries.len(),
            });
        }
        Ok(MixingMatrix { n, entries })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.n + j] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn validate_stochastic(&self, tol: f64) -> Result<()> {
        if self.entries.iter().any(|&v| v < -tol || !v.is_finite()) {
            return Err(Error::Validation(
                "mixing matrix has a negative or non-finite entry".into(),
            ));
        }
        for j in 0..self.n {
            let s = self.column_sum(j);
            if (s - 1.0).abs() > tol {
                return Err(Error::Validation(format!("column {j} sums to {s}, not 1")));
            }
        }
        Ok(())
    }

    pub fn mul(&self, other: &MixingMatrix) -> MixingMatrix {
        assert_eq!(self.n, other.n);
        MixingMatrix {
            n: self.n,
            entries: linalg::matmul(&self.entries, &other.entries, self.n),
        }
    }
}

/// Staleness-aware mixing matrix for an aggregation triggered by cluster
/// `trigger`. With `A = N_d ∪ {d}` and `Ψ = Σ_{i∈A} ψ(δ_i)`:
///
/// * column `d`: `p(i, d) = ψ(δ_i)/Ψ` for `i ∈ A`;
/// * neighbor column `j`: `p(d, j) = p(j, d)` and `p(j, j) = 1 − p(d, j)`;
/// * every cluster outside `A` keeps an identity column;
/// * everything else is zero.
pub fn build_mixing_matrix(
    trigger: usize,
    topology: &Topology,
    staleness: &StalenessVector,
    psi: &Psi,
) -> MixingMatrix {
    let n = topology.num_servers();
    let neighbors = topology.neighbors(trigger);
    let total: f64 = std::iter::once(trigger)
        .chain(neighbors.iter().copied())
        .map(|i| psi.eval(staleness.staleness(i)))
        .sum();

    let mut p = MixingMatrix::identity(n);
    p.set(trigger, trigger, psi.eval(staleness.staleness(trigger)) / total);
    for &j in neighbors {
        let w = psi.eval(staleness.staleness(j)) / total;
        p.set(j, trigger, w);
        p.set(trigger, j, w);
        p.set(j, j, 1.0 - w);
    }
    p
}

/// Symmetric doubly stochastic matrix with Metropolis weights
/// `1/(1 + max(deg_i, deg_j))` on edges. On regular graphs (rings) every
/// server gives equal weight `1/(deg + 1)` to itself and each neighbor,
/// which is what the staleness-aware matrix reduces to when all staleness
/// values are equal.
pub fn uniform_neighbor_matrix(topology: &Topology) -> MixingMatrix {
    let n = topology.num_servers();
    let mut p = MixingMatrix::identity(n);
    for i in 0..n {
        let mut off = 0.0;
        for &j in topology.neighbors(i) {
            let deg = topology.neighbors(i).len().max(topology.neighbors(j).len());
            let w = 1.0 / (1.0 + deg as f64);
            p.set(i, j, w);
            off += w;
        }
        p.set(i, i, 1.0 - off);
    }
    p
}

/// Second-largest eigenvalue modulus of a symmetric column-stochastic matrix.
/// Returns 0 for a 1x1 matrix.
pub fn spectral_gap(p: &MixingMatrix) -> Result<f64> {
    p.validate_stochastic(1e-9)?;
    if p.max_asymmetry() > 1e-9 {
        return Err(Error::Validation("spectral_gap needs a symmetric matrix".into()));
    }
    if p.dim() < 2 {
        return Ok(0.0);
    }
    let mut moduli: Vec<f64> = linalg::symmetric_eigenvalues(p.entries(), p.dim())
        .into_iter()
        .map(f64::abs)
        .collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    Ok(moduli[1])
}

/// `‖P_s P_{s+1} ⋯ P_{k−1} − (1/D)·11ᵀ‖_op` for a sequence of mixing
/// matrices, i.e. how far the accumulated mixing is from exact averaging.
pub fn product_deviation(seq: &[MixingMatrix]) -> Result<f64> {
    let Some(first) = seq.first() else {
        return Err(Error::Validation("empty mixing sequence".into()));
    };
    let n = first.dim();
    let mut acc = MixingMatrix::identity(n);
    for p in seq {
        if p.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: p.dim(),
            });
        }
        p.validate_stochastic(1e-9)?;
        acc = acc.mul(p);
    }
    let avg = 1.0 / n as f64;
    let diff: Vec<f64> = acc.entries().iter().map(|v| v - avg).collect();
    Ok(linalg::operator_norm(&diff, n))
}
