//! Communication graphs and doubly stochastic mixing matrices.
//!
//! Agents are indexed `0..n`. A [`Topology`] is an undirected, connected
//! graph; [`metropolis_weights`] turns it into a symmetric doubly stochastic
//! [`MixingMatrix`] whose contraction factor `rho_w = ‖W − 11ᵀ/n‖₂` is
//! strictly below one.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Retry budget used by [`erdos_renyi`].
pub const DEFAULT_RETRY_BUDGET: u64 = 10_000;

/// Tolerance accepted by [`spectral_contraction`] on row/column sums.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("a topology needs at least 2 agents, got {0}")]
    TooFewAgents(usize),
    #[error("edge probability must lie in (0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("edge ({0}, {1}) is invalid for {2} agents")]
    InvalidEdge(usize, usize, usize),
    #[error("connectivity unreachable: no connected sample within {0} attempts")]
    ConnectivityUnreachable(u64),
    #[error("graph is not connected")]
    Disconnected,
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("not doubly stochastic: max row/column sum deviation {0:e}")]
    NotDoublyStochastic(f64),
    #[error("mixing matrix invalid: {0}")]
    InvalidMixing(String),
}

/// Undirected communication graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct Topology {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    n: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<TopologyRepr> for Topology {
    type Error = TopologyError;

    fn try_from(repr: TopologyRepr) -> Result<Self, Self::Error> {
        Topology::new(repr.n, repr.edges.into_iter().map(|[i, j]| (i, j)))
    }
}

impl From<Topology> for TopologyRepr {
    fn from(t: Topology) -> Self {
        TopologyRepr {
            n: t.n,
            edges: t.edges.into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }
}

impl Topology {
    /// Builds a graph from an edge list. Pairs are stored as `(min, max)`, so
    /// `(i, j)` and `(j, i)` describe the same link. Connectivity is not
    /// required here; see [`Topology::is_connected`].
    pub fn new<I>(n: usize, edges: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if n == 0 {
            return Err(TopologyError::TooFewAgents(n));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j || i >= n || j >= n {
                return Err(TopologyError::InvalidEdge(i, j, n));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Topology { n, edges: set })
    }

    /// A single agent with no links. Useful for reducing the engine to
    /// centralized zero-order SGD.
    pub fn singleton() -> Self {
        Topology {
            n: 1,
            edges: BTreeSet::new(),
        }
    }

    pub fn complete(n: usize) -> Result<Self, TopologyError> {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Topology::new(n, edges)
    }

    pub fn path(n: usize) -> Result<Self, TopologyError> {
        Topology::new(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn ring(n: usize) -> Result<Self, TopologyError> {
        if n < 3 {
            return Topology::path(n);
        }
        Topology::new(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Breadth-first search from agent 0.
    pub fn is_connected(&self) -> bool {
        let adj = self.neighbors();
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count == self.n
    }
}

/// Result of [`erdos_renyi_with_budget`]: the accepted graph together with
/// the number of rejected (disconnected) samples before it.
#[derive(Debug, Clone)]
pub struct ErdosRenyiSample {
    pub topology: Topology,
    pub retries: u64,
    /// Seed that produced the accepted sample (`seed + retries`).
    pub accepted_seed: u64,
}

/// Connected G(n, p) graph. Disconnected samples are redrawn with seed
/// `seed + 1`, `seed + 2`, ... until one is connected.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Topology, TopologyError> {
    erdos_renyi_with_budget(n, p, seed, DEFAULT_RETRY_BUDGET).map(|s| s.topology)
}

pub fn erdos_renyi_with_budget(n: usize, p: f64, seed: u64, budget: u64) -> Result<ErdosRenyiSample, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooFewAgents(n));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(TopologyError::InvalidProbability(p));
    }
    for retries in 0..budget {
        let attempt_seed = seed.wrapping_add(retries);
        let topology = sample_gnp(n, p, attempt_seed);
        if topology.is_connected() {
            return Ok(ErdosRenyiSample {
                topology,
                retries,
                accepted_seed: attempt_seed,
            });
        }
    }
    Err(TopologyError::ConnectivityUnreachable(budget))
}

fn sample_gnp(n: usize, p: f64, seed: u64) -> Topology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if p >= 1.0 || rng.random::<f64>() < p {
                edges.insert((i, j));
            }
        }
    }
    Topology { n, edges }
}

/// Symmetric doubly stochastic coupling matrix with its contraction factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixingRepr", into = "MixingRepr")]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    rho_w: f64,
}

#[derive(Serialize, Deserialize)]
struct MixingRepr {
    w: Vec<Vec<f64>>,
    rho_w: f64,
}

impl TryFrom<MixingRepr> for MixingMatrix {
    type Error = TopologyError;

    fn try_from(repr: MixingRepr) -> Result<Self, Self::Error> {
        let n = repr.w.len();
        if repr.w.iter().any(|row| row.len() != n) {
            return Err(TopologyError::NotSquare(n, repr.w.first().map_or(0, Vec::len)));
        }
        let w = DMatrix::from_fn(n, n, |i, j| repr.w[i][j]);
        MixingMatrix::from_weights(w)
    }
}

impl From<MixingMatrix> for MixingRepr {
    fn from(m: MixingMatrix) -> Self {
        let n = m.w.nrows();
        MixingRepr {
            w: (0..n).map(|i| (0..n).map(|j| m.w[(i, j)]).collect()).collect(),
            rho_w: m.rho_w,
        }
    }
}

impl MixingMatrix {
    /// Validates nonnegativity, symmetry, positive diagonal and double
    /// stochasticity, then computes `rho_w`. Rejects `rho_w >= 1`
    /// (disconnected support).
    pub fn from_weights(w: DMatrix<f64>) -> Result<Self, TopologyError> {
        let n = w.nrows();
        if w.ncols() != n || n == 0 {
            return Err(TopologyError::NotSquare(w.nrows(), w.ncols()));
        }
        for i in 0..n {
            if !(w[(i, i)] > 0.0) {
                return Err(TopologyError::InvalidMixing(format!(
                    "diagonal entry {i} is not strictly positive"
                )));
            }
            for j in 0..n {
                let v = w[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(TopologyError::InvalidMixing(format!(
                        "entry ({i}, {j}) = {v} is negative or non-finite"
                    )));
                }
                if (v - w[(j, i)]).abs() > 1e-12 {
                    return Err(TopologyError::InvalidMixing(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        let rho_w = spectral_contraction(&w)?;
        if rho_w >= 1.0 - 1e-12 {
            return Err(TopologyError::Disconnected);
        }
        Ok(MixingMatrix { w, rho_w })
    }

    /// The trivial 1×1 matrix `[1]`, with `rho_w = 0`.
    pub fn identity_single() -> Self {
        MixingMatrix {
            w: DMatrix::from_element(1, 1, 1.0),
            rho_w: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn rho_w(&self) -> f64 {
        self.rho_w
    }

    /// `(1 + rho_w²) / 2`, the per-round consensus factor used by the rate
    /// analysis.
    pub fn consensus_factor(&self) -> f64 {
        0.5 * (1.0 + self.rho_w * self.rho_w)
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn stochastic_deviation(&self) -> f64 {
        stochastic_deviation(&self.w)
    }
}

fn stochastic_deviation(w: &DMatrix<f64>) -> f64 {
    let rows = w.row_iter().map(|r| (r.sum() - 1.0).abs());
    let cols = w.column_iter().map(|c| (c.sum() - 1.0).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Metropolis–Hastings weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on
/// edges and `w_ii = 1 − Σ_{j≠i} w_ij`.
pub fn metropolis_weights(t: &Topology) -> Result<MixingMatrix, TopologyError> {
    if t.n() == 1 {
        return Ok(MixingMatrix::identity_single());
    }
    if !t.is_connected() {
        return Err(TopologyError::Disconnected);
    }
    let n = t.n();
    let deg = t.degrees();
    let mut w = DMatrix::zeros(n, n);
    for (i, j) in t.edges() {
        let v = 1.0 / (1 + deg[i].max(deg[j])) as f64;
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::from_weights(w)
}

/// Largest singular value of `W − 11ᵀ/n`, from the eigenvalues of
/// `(W − J/n)ᵀ(W − J/n)`.
pub fn spectral_contraction(w: &DMatrix<f64>) -> Result<f64, TopologyError> {
    let n = w.nrows();
    if w.ncols() != n || n == 0 {
        return Err(TopologyError::NotSquare(w.nrows(), w.ncols()));
    }
    let dev = stochastic_deviation(w);
    if dev > STOCHASTIC_TOLERANCE {
        return Err(TopologyError::NotDoublyStochastic(dev));
    }
    let centered = w - DMatrix::from_element(n, n, 1.0 / n as f64);
    let gram = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    Ok(top.max(0.0).sqrt())
}

/// `(1/n) 1ᵀ ω`, the column mean of a stacked `n × d` matrix.
pub fn column_mean(omega: &DMatrix<f64>) -> nalgebra::RowDVector<f64> {
    omega.row_mean()
}

/// `‖ω − 1ω̄‖_F`.
pub fn distance_to_mean(omega: &DMatrix<f64>) -> f64 {
    let mean = omega.row_mean();
    omega.row_iter().map(|r| (r - &mean).norm_squared()).sum::<f64>().sqrt()
}
