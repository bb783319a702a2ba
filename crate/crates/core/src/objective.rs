//! Per-agent noisy one-point function oracles.
//!
//! An [`Objective`] holds `n` local functions `f_i(x, S)`. A query returns
//! `f_i(x, S) + ζ` with the process sample `S` and the additive noise `ζ`
//! drawn fresh from the caller's [`AgentStreams`]. Two families are
//! provided:
//!
//! * **quadratic**: `F_i(x) = ½(x − c_i)ᵀQ_i(x − c_i)`, with `S` a mean-one
//!   multiplicative scalar so that `E_S f_i = F_i` exactly. The analytic
//!   record (`x*`, `λ`, `L`, `α₁`) is exact.
//! * **logistic**: regularized logistic loss over a partitioned [`Dataset`]
//!   whose margins are perturbed by `u ~ N(1, σ_u)`. Ground truth is taken at
//!   the `u ≡ 1` surrogate, with `x*` computed by a centralized Newton solve.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::AgentStreams;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("query point has non-finite entries")]
    NonFinite,
    #[error("agent {agent} out of range for {n} agents")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("objective has no analytic gradient")]
    NoAnalyticGradient,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("agent {0} holds no samples")]
    EmptyPartition(usize),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Additive zero-mean Gaussian query noise with variance `α₄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec { variance: 0.0 };

    pub fn new(variance: f64) -> Result<Self, ObjectiveError> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(ObjectiveError::InvalidParameter(format!(
                "noise variance must be finite and >= 0, got {variance}"
            )));
        }
        Ok(NoiseSpec { variance })
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.variance == 0.0 {
            0.0
        } else {
            self.std() * rng.sample::<f64, _>(StandardNormal)
        }
    }
}

/// Ground truth used for verification and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRecord {
    pub x_star: Vec<f64>,
    /// Strong-convexity modulus of the global objective.
    pub lambda: f64,
    /// Smoothness constant of the global objective.
    pub smoothness: f64,
    /// Bound on every local Hessian norm `‖∇²F_i‖₂`.
    pub alpha1: f64,
}

/// One draw of the stochastic process `S` for a single query.
#[derive(Debug, Clone, PartialEq)]
pub enum ProcessSample {
    /// Multiplicative scalar applied to the whole local value.
    Scale(f64),
    /// One margin multiplier `u_ij` per local sample.
    Margins(Vec<f64>),
}

/// Labeled feature matrix split across agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    /// Row-major `m × d`.
    features: Vec<f64>,
    labels: Vec<f64>,
    partition: Vec<Range<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self, ObjectiveError> {
        if dim == 0 {
            return Err(ObjectiveError::Dataset("feature dimension must be >= 1".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(ObjectiveError::Dataset(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
            return Err(ObjectiveError::Dataset(format!("label {bad} is not -1 or +1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::Dataset("non-finite feature value".into()));
        }
        let m = labels.len();
        Ok(Dataset {
            dim,
            features,
            labels,
            #[allow(clippy::single_range_in_vec_init)]
            partition: vec![0..m],
        })
    }

    /// Two Gaussian clusters `N(±(separation/2)·u, I)` around a random unit
    /// direction `u`, with balanced `±1` labels in shuffled order.
    pub fn synthetic_two_class(
        n_samples: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    ) -> Result<Self, ObjectiveError> {
        if n_samples < 2 || dim == 0 {
            return Err(ObjectiveError::Dataset(format!(
                "need n_samples >= 2 and d >= 1, got {n_samples} and {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);

        let mut labels: Vec<f64> = (0..n_samples)
            .map(|j| if j < n_samples.div_ceil(2) { 1.0 } else { -1.0 })
            .collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(n_samples * dim);
        for &y in &labels {
            for &u in &dir {
                let z: f64 = rng.sample(StandardNormal);
                features.push(y * 0.5 * separation * u + z);
            }
        }
        Dataset::new(dim, features, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    pub fn label(&self, j: usize) -> f64 {
        self.labels[j]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn partition(&self) -> &[Range<usize>] {
        &self.partition
    }

    /// Splits off the last `tail` rows as a held-out set. Both halves come
    /// back unpartitioned.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset), ObjectiveError> {
        let m = self.len();
        if tail == 0 || tail >= m {
            return Err(ObjectiveError::Dataset(format!("cannot hold out {tail} of {m} rows")));
        }
        let cut = m - tail;
        let head = Dataset::new(
            self.dim,
            self.features[..cut * self.dim].to_vec(),
            self.labels[..cut].to_vec(),
        )?;
        let rest = Dataset::new(
            self.dim,
            self.features[cut * self.dim..].to_vec(),
            self.labels[cut..].to_vec(),
        )?;
        Ok((head, rest))
    }

    /// Contiguous split into `n` blocks of `m / n` rows; the first `m mod n`
    /// agents receive one extra row.
    pub fn partitioned(mut self, n: usize) -> Result<Self, ObjectiveError> {
        if n == 0 {
            return Err(ObjectiveError::InvalidParameter("zero agents".into()));
        }
        let m = self.len();
        let (base, extra) = (m / n, m % n);
        let mut start = 0;
        self.partition = (0..n)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Ok(self)
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self, ObjectiveError> {
        let mut reader = csv::Reader::from_path(path)?;
        Self::from_csv_reader(&mut reader)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: &mut csv::Reader<R>) -> Result<Self, ObjectiveError> {
        let headers = reader.headers()?.clone();
        let width = headers.len();
        if width < 2 || &headers[width - 1] != "label" {
            return Err(ObjectiveError::Dataset("expected header f0,...,f{d-1},label".into()));
        }
        for (k, h) in headers.iter().take(width - 1).enumerate() {
            if h != format!("f{k}") {
                return Err(ObjectiveError::Dataset(format!(
                    "column {k} is named {h:?}, expected \"f{k}\""
                )));
            }
        }
        let dim = width - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            for (k, field) in record.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| ObjectiveError::Dataset(format!("row {line}, column {k}: cannot parse {field:?}")))?;
                if k == dim {
                    labels.push(v);
                } else {
                    features.push(v);
                }
            }
        }
        Dataset::new(dim, features, labels)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), ObjectiveError> {
        let mut writer = csv::Writer::from_path(path)?;
        self.write_csv_to(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: &mut csv::Writer<W>) -> Result<(), ObjectiveError> {
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("f{k}")).collect();
        header.push("label".into());
        writer.write_record(&header)?;
        for j in 0..self.len() {
            let mut rec: Vec<String> = self.row(j).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(format!("{}", self.labels[j] as i64));
            writer.write_record(&rec)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticParts {
    pub q: Vec<DMatrix<f64>>,
    pub centers: Vec<DVector<f64>>,
    /// Standard deviation of the multiplicative process scalar `s`.
    pub s_std: f64,
}

#[derive(Debug, Clone)]
pub struct LogisticParts {
    pub data: Dataset,
    pub c_reg: f64,
    pub sigma_u: f64,
}

#[derive(Debug, Clone)]
pub enum ObjectiveKind {
    Quadratic(QuadraticParts),
    Logistic(LogisticParts),
}

/// Immutable collection of local one-point oracles.
#[derive(Debug, Clone)]
pub struct Objective {
    dim: usize,
    n_agents: usize,
    kind: ObjectiveKind,
    noise: NoiseSpec,
    analytic: Option<AnalyticRecord>,
}

/// What an estimator needs from an objective: a single noisy function value.
pub trait ZeroOrderOracle {
    fn dim(&self) -> usize;
    fn n_agents(&self) -> usize;
    fn query(&self, agent: usize, x: &DVector<f64>, streams: &mut AgentStreams) -> Result<f64, ObjectiveError>;
}

/// Options for [`make_quadratic_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub n_agents: usize,
    pub dim: usize,
    pub condition: f64,
    /// Standard deviation of the local centers `c_i` around the origin.
    #[serde(default = "default_center_spread")]
    pub center_spread: f64,
    /// Variance of the multiplicative process scalar.
    #[serde(default = "default_s_variance")]
    pub s_variance: f64,
    #[serde(default)]
    pub noise_variance: f64,
    pub seed: u64,
}

fn default_center_spread() -> f64 {
    1.0
}

fn default_s_variance() -> f64 {
    1e-4
}

/// Random quadratic objective with `Q_i` eigenvalues in `[1, condition]`,
/// default center spread 1, process variance `1e-4` and no additive noise.
pub fn make_quadratic(n: usize, d: usize, condition: f64, seed: u64) -> Result<Objective, ObjectiveError> {
    make_quadratic_with(&QuadraticSpec {
        n_agents: n,
        dim: d,
        condition,
        center_spread: default_center_spread(),
        s_variance: default_s_variance(),
        noise_variance: 0.0,
        seed,
    })
}

pub fn make_quadratic_with(spec: &QuadraticSpec) -> Result<Objective, ObjectiveError> {
    let QuadraticSpec {
        n_agents: n,
        dim: d,
        condition,
        center_spread,
        s_variance,
        noise_variance,
        seed,
    } = *spec;
    if n == 0 || d == 0 {
        return Err(ObjectiveError::InvalidParameter(format!(
            "need n >= 1 and d >= 1, got n = {n}, d = {d}"
        )));
    }
    if !(condition >= 1.0 && condition.is_finite()) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "condition must be >= 1, got {condition}"
        )));
    }
    if !(center_spread >= 0.0 && s_variance >= 0.0) {
        return Err(ObjectiveError::InvalidParameter(
            "center spread and process variance must be >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    for _ in 0..n {
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let basis = g.qr().q();
        let eig = DVector::from_fn(d, |_, _| 1.0 + (condition - 1.0) * rng.random::<f64>());
        let qi = &basis * DMatrix::from_diagonal(&eig) * basis.transpose();
        // Symmetrize away rounding so the quadratic form is exact.
        q.push((&qi + qi.transpose()) * 0.5);
        centers.push(DVector::from_fn(d, |_, _| {
            center_spread * rng.sample::<f64, _>(StandardNormal)
        }));
    }
    Objective::quadratic(
        QuadraticParts {
            q,
            centers,
            s_std: s_variance.sqrt(),
        },
        NoiseSpec::new(noise_variance)?,
    )
}

/// Regularized logistic objective over a partitioned dataset.
pub fn make_logistic(data: Dataset, c_reg: f64, sigma_u: f64, noise: NoiseSpec) -> Result<Objective, ObjectiveError> {
    if !(c_reg > 0.0 && c_reg.is_finite()) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "c_reg must be > 0, got {c_reg}"
        )));
    }
    if !(sigma_u >= 0.0 && sigma_u.is_finite()) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "sigma_u must be >= 0, got {sigma_u}"
        )));
    }
    if let Some(i) = data.partition.iter().position(|r| r.is_empty()) {
        return Err(ObjectiveError::EmptyPartition(i));
    }
    let covered: usize = data.partition.iter().map(|r| r.len()).sum();
    if covered != data.len() {
        return Err(ObjectiveError::Dataset("partition does not cover every row".into()));
    }
    let parts = LogisticParts { data, c_reg, sigma_u };
    let mut obj = Objective {
        dim: parts.data.dim,
        n_agents: parts.data.partition.len(),
        kind: ObjectiveKind::Logistic(parts),
        noise,
        analytic: None,
    };
    obj.analytic = Some(obj.logistic_analytic()?);
    Ok(obj)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.max()
}

fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

impl Objective {
    /// Quadratic objective from explicit parts; fills the exact analytic
    /// record.
    pub fn quadratic(parts: QuadraticParts, noise: NoiseSpec) -> Result<Self, ObjectiveError> {
        let n = parts.q.len();
        if n == 0 || parts.centers.len() != n {
            return Err(ObjectiveError::InvalidParameter(
                "need one Q_i and one c_i per agent".into(),
            ));
        }
        let d = parts.centers[0].len();
        for (qi, ci) in parts.q.iter().zip(&parts.centers) {
            if qi.nrows() != d || qi.ncols() != d || ci.len() != d {
                return Err(ObjectiveError::DimensionMismatch {
                    expected: d,
                    got: qi.nrows().max(ci.len()),
                });
            }
        }
        let q_sum: DMatrix<f64> = parts.q.iter().fold(DMatrix::zeros(d, d), |acc, qi| acc + qi);
        let rhs: DVector<f64> = parts
            .q
            .iter()
            .zip(&parts.centers)
            .fold(DVector::zeros(d), |acc, (qi, ci)| acc + qi * ci);
        let chol = q_sum
            .clone()
            .cholesky()
            .ok_or_else(|| ObjectiveError::InvalidParameter("sum of Q_i is not positive definite".into()))?;
        let x_star = chol.solve(&rhs);
        let q_bar = q_sum / n as f64;
        let lambda = smallest_eigenvalue(&q_bar);
        let smoothness = largest_eigenvalue(&q_bar);
        let alpha1 = parts.q.iter().map(largest_eigenvalue).fold(0.0, f64::max);
        if !(lambda > 0.0) {
            return Err(ObjectiveError::InvalidParameter(
                "mean Hessian is not positive definite".into(),
            ));
        }
        Ok(Objective {
            dim: d,
            n_agents: n,
            kind: ObjectiveKind::Quadratic(parts),
            noise,
            analytic: Some(AnalyticRecord {
                x_star: x_star.iter().copied().collect(),
                lambda,
                smoothness,
                alpha1,
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ObjectiveKind::Quadratic(_) => "quadratic",
            ObjectiveKind::Logistic(_) => "logistic",
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        self.noise
    }

    pub fn analytic(&self) -> Option<&AnalyticRecord> {
        self.analytic.as_ref()
    }

    pub fn x_star(&self) -> Option<DVector<f64>> {
        self.analytic.as_ref().map(|a| DVector::from_column_slice(&a.x_star))
    }

    fn check(&self, agent: usize, x: &DVector<f64>) -> Result<(), ObjectiveError> {
        if agent >= self.n_agents {
            return Err(ObjectiveError::AgentOutOfRange {
                agent,
                n: self.n_agents,
            });
        }
        if x.len() != self.dim {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite);
        }
        Ok(())
    }

    /// Draws the process sample `S` for one query of `agent`.
    pub fn draw_process<R: Rng + ?Sized>(&self, agent: usize, rng: &mut R) -> ProcessSample {
        match &self.kind {
            ObjectiveKind::Quadratic(p) => {
                let z: f64 = rng.sample(StandardNormal);
                ProcessSample::Scale(1.0 + p.s_std * z)
            }
            ObjectiveKind::Logistic(p) => {
                let rows = p.data.partition[agent].len();
                if p.sigma_u == 0.0 {
                    ProcessSample::Margins(vec![1.0; rows])
                } else {
                    let normal = Normal::new(1.0, p.sigma_u).expect("sigma_u validated at construction");
                    ProcessSample::Margins((0..rows).map(|_| normal.sample(rng)).collect())
                }
            }
        }
    }

    /// Noise-free local value `f_i(x, S)` for a given process sample.
    pub fn value_at(&self, agent: usize, x: &DVector<f64>, sample: &ProcessSample) -> Result<f64, ObjectiveError> {
        self.check(agent, x)?;
        Ok(match (&self.kind, sample) {
            (ObjectiveKind::Quadratic(p), ProcessSample::Scale(s)) => quad_value(p, agent, x.as_slice()) * s,
            (ObjectiveKind::Logistic(p), ProcessSample::Margins(u)) => logistic_value(p, agent, x.as_slice(), Some(u)),
            _ => {
                return Err(ObjectiveError::InvalidParameter(
                    "process sample does not match objective kind".into(),
                ))
            }
        })
    }

    /// One noisy query `f_i(x, S) + ζ`, drawing `S` from `process` and `ζ`
    /// from `noise`.
    pub fn query_with<R1, R2>(
        &self,
        agent: usize,
        x: &DVector<f64>,
        process: &mut R1,
        noise: &mut R2,
    ) -> Result<f64, ObjectiveError>
    where
        R1: Rng + ?Sized,
        R2: Rng + ?Sized,
    {
        self.check(agent, x)?;
        let value = match &self.kind {
            ObjectiveKind::Quadratic(p) => {
                let z: f64 = process.sample(StandardNormal);
                quad_value(p, agent, x.as_slice()) * (1.0 + p.s_std * z)
            }
            ObjectiveKind::Logistic(_) => {
                let s = self.draw_process(agent, process);
                self.value_at(agent, x, &s)?
            }
        };
        Ok(value + self.noise.sample(noise))
    }

    /// Expected local value `F_i(x)`: exact for the quadratic, the `u ≡ 1`
    /// surrogate for the logistic objective.
    pub fn local_value(&self, agent: usize, x: &DVector<f64>) -> Result<f64, ObjectiveError> {
        self.check(agent, x)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic(p) => quad_value(p, agent, x.as_slice()),
            ObjectiveKind::Logistic(p) => logistic_value(p, agent, x.as_slice(), None),
        })
    }

    pub fn local_gradient(&self, agent: usize, x: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        self.check(agent, x)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic(p) => &p.q[agent] * (x - &p.centers[agent]),
            ObjectiveKind::Logistic(p) => {
                let mut grad = x * (2.0 * p.c_reg);
                let inv_m = 1.0 / p.data.len() as f64;
                for j in p.data.partition[agent].clone() {
                    let row = p.data.row(j);
                    let y = p.data.labels[j];
                    let coef = -y * sigmoid(-y * dot(row, x.as_slice())) * inv_m;
                    for (g, v) in grad.iter_mut().zip(row) {
                        *g += coef * v;
                    }
                }
                grad
            }
        })
    }

    pub fn local_hessian(&self, agent: usize, x: &DVector<f64>) -> Result<DMatrix<f64>, ObjectiveError> {
        self.check(agent, x)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic(p) => p.q[agent].clone(),
            ObjectiveKind::Logistic(p) => {
                let d = self.dim;
                let mut h = DMatrix::identity(d, d) * (2.0 * p.c_reg);
                let inv_m = 1.0 / p.data.len() as f64;
                for j in p.data.partition[agent].clone() {
                    let row = p.data.row(j);
                    let s = sigmoid(p.data.labels[j] * dot(row, x.as_slice()));
                    let w = s * (1.0 - s) * inv_m;
                    for a in 0..d {
                        for b in 0..d {
                            h[(a, b)] += w * row[a] * row[b];
                        }
                    }
                }
                h
            }
        })
    }

    /// `𝓕(x) = (1/n) Σ_i F_i(x)`.
    pub fn global_value(&self, x: &DVector<f64>) -> Result<f64, ObjectiveError> {
        let mut total = 0.0;
        for i in 0..self.n_agents {
            total += self.local_value(i, x)?;
        }
        Ok(total / self.n_agents as f64)
    }

    pub fn global_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        let mut total = DVector::zeros(self.dim);
        for i in 0..self.n_agents {
            total += self.local_gradient(i, x)?;
        }
        Ok(total / self.n_agents as f64)
    }

    pub fn global_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ObjectiveError> {
        let mut total = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.n_agents {
            total += self.local_hessian(i, x)?;
        }
        Ok(total / self.n_agents as f64)
    }

    /// `h(x) = (1/n) Σ_i ∇F_i(x_i)` for a stacked `n × d` matrix of local
    /// copies.
    pub fn true_mean_gradient(&self, x_stack: &DMatrix<f64>) -> Result<DVector<f64>, ObjectiveError> {
        if self.analytic.is_none() {
            return Err(ObjectiveError::NoAnalyticGradient);
        }
        if x_stack.nrows() != self.n_agents || x_stack.ncols() != self.dim {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.n_agents * self.dim,
                got: x_stack.nrows() * x_stack.ncols(),
            });
        }
        let mut total = DVector::zeros(self.dim);
        for i in 0..self.n_agents {
            let xi = x_stack.row(i).transpose();
            total += self.local_gradient(i, &xi)?;
        }
        Ok(total / self.n_agents as f64)
    }

    /// Largest `‖∇²F_i(x)‖₂` over the given points and all agents.
    pub fn sampled_hessian_bound(&self, points: &[DVector<f64>]) -> Result<f64, ObjectiveError> {
        let mut best: f64 = 0.0;
        for x in points {
            for i in 0..self.n_agents {
                let h = self.local_hessian(i, x)?;
                let eig = SymmetricEigen::new(h).eigenvalues;
                best = best.max(eig.iter().map(|v| v.abs()).fold(0.0, f64::max));
            }
        }
        Ok(best)
    }

    fn logistic_analytic(&self) -> Result<AnalyticRecord, ObjectiveError> {
        let ObjectiveKind::Logistic(p) = &self.kind else {
            unreachable!("logistic_analytic called on a non-logistic objective")
        };
        let x_star = self.newton_minimize(1e-10)?;
        let d = self.dim;
        let m = p.data.len() as f64;
        let mut gram_all = DMatrix::zeros(d, d);
        let mut alpha1: f64 = 0.0;
        for range in &p.data.partition {
            let mut gram = DMatrix::zeros(d, d);
            for j in range.clone() {
                let row = DVector::from_column_slice(p.data.row(j));
                gram += &row * row.transpose();
            }
            alpha1 = alpha1.max(2.0 * p.c_reg + 0.25 * largest_eigenvalue(&gram) / m);
            gram_all += gram;
        }
        let n = self.n_agents as f64;
        Ok(AnalyticRecord {
            x_star: x_star.iter().copied().collect(),
            lambda: 2.0 * p.c_reg,
            smoothness: 2.0 * p.c_reg + 0.25 * largest_eigenvalue(&gram_all) / (n * m),
            alpha1,
        })
    }

    /// Damped Newton on `𝓕` until the Newton decrement falls below
    /// `rel_tol` relative to the starting gradient.
    fn newton_minimize(&self, rel_tol: f64) -> Result<DVector<f64>, ObjectiveError> {
        let mut x = DVector::zeros(self.dim);
        let g0 = self.global_gradient(&x)?.norm().max(1e-300);
        for _ in 0..200 {
            let g = self.global_gradient(&x)?;
            if g.norm() <= rel_tol * g0 * 1e-3 {
                break;
            }
            let h = self.global_hessian(&x)?;
            let step = h
                .cholesky()
                .ok_or_else(|| ObjectiveError::InvalidParameter("Hessian not positive definite".into()))?
                .solve(&g);
            let f0 = self.global_value(&x)?;
            let slope = g.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &x - &step * t;
                if self.global_value(&cand)? <= f0 - 0.25 * t * slope || t < 1e-12 {
                    x = cand;
                    break;
                }
                t *= 0.5;
            }
            if slope.abs() <= (rel_tol * f0.abs().max(1.0)).powi(2) {
                break;
            }
        }
        Ok(x)
    }
}

impl ZeroOrderOracle for Objective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn query(&self, agent: usize, x: &DVector<f64>, streams: &mut AgentStreams) -> Result<f64, ObjectiveError> {
        self.query_with(agent, x, &mut streams.process, &mut streams.noise)
    }
}

fn quad_value(p: &QuadraticParts, agent: usize, x: &[f64]) -> f64 {
    let q = &p.q[agent];
    let c = p.centers[agent].as_slice();
    let d = c.len();
    let mut total = 0.0;
    for b in 0..d {
        let zb = x[b] - c[b];
        let col = q.column(b);
        let mut acc = 0.0;
        for a in 0..d {
            acc += col[a] * (x[a] - c[a]);
        }
        total += zb * acc;
    }
    0.5 * total
}

fn logistic_value(p: &LogisticParts, agent: usize, x: &[f64], margins: Option<&[f64]>) -> f64 {
    let range = p.data.partition[agent].clone();
    let mut loss = 0.0;
    for (k, j) in range.enumerate() {
        let u = margins.map_or(1.0, |u| u[k]);
        loss += softplus(-u * p.data.labels[j] * dot(p.data.row(j), x));
    }
    loss / p.data.len() as f64 + p.c_reg * dot(x, x)
}
