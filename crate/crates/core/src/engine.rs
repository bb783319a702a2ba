//! Synchronous gradient-tracking rounds.
//!
//! Each round computes `x_{k+1} = W(x_k − α_k y_k)`, forms one gradient
//! estimate per agent at `x_{k+1}`, and updates the tracker
//! `y_{k+1} = W y_k + g_{k+1} − g_k`. Agent variables are stored stacked as
//! `n × d` matrices with one row per agent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{fill_perturbation, EstimatorError, PerturbationSpec, Schedule};
use crate::objective::{Objective, ObjectiveError, ZeroOrderOracle};
use crate::streams::{stream, AgentStreams, StreamRole};
use crate::topology::MixingMatrix;

/// Any state entry above this magnitude aborts the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("iterates diverged at round {k} (|entry| = {magnitude:e})")]
    Diverged { k: u64, magnitude: f64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Gradient tracking driven by one-point function queries.
    OnepointDsgt,
    /// Gradient tracking driven by the exact local gradient plus Gaussian
    /// noise.
    DsgtNoisygrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub schedule: Schedule,
    /// Required for [`Algorithm::OnepointDsgt`].
    pub perturbation: Option<PerturbationSpec>,
    /// Per-coordinate gradient-noise standard deviation of the baseline.
    pub grad_noise_std: f64,
    pub seed: u64,
    pub max_iters: u64,
    /// Initial iterates are uniform on `[−x0_box, x0_box]^d`.
    pub x0_box: f64,
}

impl AlgoConfig {
    pub fn onepoint(schedule: Schedule, perturbation: PerturbationSpec, seed: u64, max_iters: u64) -> Self {
        AlgoConfig {
            algorithm: Algorithm::OnepointDsgt,
            schedule,
            perturbation: Some(perturbation),
            grad_noise_std: 1.0,
            seed,
            max_iters,
            x0_box: 0.5,
        }
    }

    pub fn noisy_gradient(schedule: Schedule, grad_noise_std: f64, seed: u64, max_iters: u64) -> Self {
        AlgoConfig {
            algorithm: Algorithm::DsgtNoisygrad,
            schedule,
            perturbation: None,
            grad_noise_std,
            seed,
            max_iters,
            x0_box: 0.5,
        }
    }

    pub fn validate(&self, obj: &Objective, w: &MixingMatrix) -> Result<(), EngineError> {
        if w.n() != obj.n_agents() {
            return Err(EngineError::DimensionMismatch(format!(
                "mixing matrix has {} agents, objective has {}",
                w.n(),
                obj.n_agents()
            )));
        }
        if !(self.x0_box >= 0.0 && self.x0_box.is_finite()) {
            return Err(EngineError::Config(format!("x0_box must be >= 0, got {}", self.x0_box)));
        }
        match self.algorithm {
            Algorithm::OnepointDsgt => {
                let spec = self
                    .perturbation
                    .ok_or_else(|| EngineError::Config("onepoint_dsgt needs a perturbation spec".into()))?;
                if spec.dim != obj.dim() {
                    return Err(EngineError::DimensionMismatch(format!(
                        "perturbation dimension {} differs from objective dimension {}",
                        spec.dim,
                        obj.dim()
                    )));
                }
            }
            Algorithm::DsgtNoisygrad => {
                if !(self.grad_noise_std >= 0.0 && self.grad_noise_std.is_finite()) {
                    return Err(EngineError::Config(format!(
                        "grad_noise_std must be >= 0, got {}",
                        self.grad_noise_std
                    )));
                }
                if obj.analytic().is_none() {
                    return Err(EngineError::Config("dsgt_noisygrad needs analytic gradients".into()));
                }
            }
        }
        Ok(())
    }
}

/// Stacked agent variables at round `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub k: u64,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Estimates `g_k` formed at `x_k`.
    pub g_prev: DMatrix<f64>,
}

impl SwarmState {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x_bar(&self) -> DVector<f64> {
        self.x.row_mean().transpose()
    }

    pub fn y_bar(&self) -> DVector<f64> {
        self.y.row_mean().transpose()
    }

    pub fn g_bar(&self) -> DVector<f64> {
        self.g_prev.row_mean().transpose()
    }

    fn max_magnitude(&self) -> f64 {
        [&self.x, &self.y, &self.g_prev]
            .iter()
            .flat_map(|m| m.iter())
            .fold(
                0.0,
                |acc: f64, v| if v.is_finite() { acc.max(v.abs()) } else { f64::INFINITY },
            )
    }
}

/// Receives the state after initialization and after every round.
pub trait Observer {
    fn observe(&mut self, state: &SwarmState) -> Result<(), EngineError>;
}

impl<F: FnMut(&SwarmState) -> Result<(), EngineError>> Observer for F {
    fn observe(&mut self, state: &SwarmState) -> Result<(), EngineError> {
        self(state)
    }
}

/// A running instance of one algorithm on one objective and network.
pub struct Simulation<'a> {
    obj: &'a Objective,
    w: &'a MixingMatrix,
    cfg: AlgoConfig,
    streams: Vec<AgentStreams>,
    state: SwarmState,
    scratch: DMatrix<f64>,
    g_next: DMatrix<f64>,
    probe: DVector<f64>,
    phi: Vec<f64>,
}

impl<'a> Simulation<'a> {
    /// Draws `x₀` from the per-agent init streams and forms `y₀ = g₀`.
    pub fn init(obj: &'a Objective, w: &'a MixingMatrix, cfg: &AlgoConfig) -> Result<Self, EngineError> {
        cfg.validate(obj, w)?;
        let (n, d) = (obj.n_agents(), obj.dim());
        let mut x0 = DMatrix::zeros(n, d);
        for i in 0..n {
            let mut rng = stream(cfg.seed, i, StreamRole::Init);
            for c in 0..d {
                x0[(i, c)] = if cfg.x0_box > 0.0 {
                    rng.random_range(-cfg.x0_box..=cfg.x0_box)
                } else {
                    0.0
                };
            }
        }
        Self::init_at(obj, w, cfg, x0)
    }

    /// Starts from a given `x₀`.
    pub fn init_at(
        obj: &'a Objective,
        w: &'a MixingMatrix,
        cfg: &AlgoConfig,
        x0: DMatrix<f64>,
    ) -> Result<Self, EngineError> {
        cfg.validate(obj, w)?;
        let (n, d) = (obj.n_agents(), obj.dim());
        if x0.nrows() != n || x0.ncols() != d {
            return Err(EngineError::DimensionMismatch(format!(
                "x0 is {}x{}, expected {n}x{d}",
                x0.nrows(),
                x0.ncols()
            )));
        }
        let mut sim = Simulation {
            obj,
            w,
            cfg: cfg.clone(),
            streams: AgentStreams::for_agents(cfg.seed, n),
            state: SwarmState {
                k: 0,
                x: x0,
                y: DMatrix::zeros(n, d),
                g_prev: DMatrix::zeros(n, d),
            },
            scratch: DMatrix::zeros(n, d),
            g_next: DMatrix::zeros(n, d),
            probe: DVector::zeros(d),
            phi: vec![0.0; d],
        };
        let gamma0 = sim.cfg.schedule.gamma(0);
        let x = sim.state.x.clone();
        let mut g0 = DMatrix::zeros(n, d);
        sim.estimates(&x, gamma0, &mut g0)?;
        sim.state.y = g0.clone();
        sim.state.g_prev = g0;
        sim.guard()?;
        Ok(sim)
    }

    pub fn state(&self) -> &SwarmState {
        &self.state
    }

    pub fn config(&self) -> &AlgoConfig {
        &self.cfg
    }

    pub fn into_state(self) -> SwarmState {
        self.state
    }

    /// One synchronous round.
    pub fn step(&mut self) -> Result<(), EngineError> {
        let k = self.state.k;
        let alpha = self.cfg.schedule.alpha(k);
        let gamma_next = self.cfg.schedule.gamma(k + 1);
        let w = self.w.weights();

        self.scratch.copy_from(&self.state.x);
        self.scratch.zip_apply(&self.state.y, |z, y| *z -= alpha * y);
        self.state.x.gemm(1.0, w, &self.scratch, 0.0);

        let x = std::mem::replace(&mut self.state.x, DMatrix::zeros(0, 0));
        let mut g_next = std::mem::replace(&mut self.g_next, DMatrix::zeros(0, 0));
        let result = self.estimates(&x, gamma_next, &mut g_next);
        self.state.x = x;
        result?;

        // y ← W y + g_{k+1} − g_k, reusing scratch for W y.
        self.scratch.gemm(1.0, w, &self.state.y, 0.0);
        self.scratch += &g_next;
        self.scratch -= &self.state.g_prev;
        std::mem::swap(&mut self.state.y, &mut self.scratch);
        self.g_next = std::mem::replace(&mut self.state.g_prev, g_next);
        self.state.k += 1;
        self.guard()
    }

    fn guard(&self) -> Result<(), EngineError> {
        let magnitude = self.state.max_magnitude();
        if magnitude > DIVERGENCE_THRESHOLD {
            return Err(EngineError::Diverged {
                k: self.state.k,
                magnitude,
            });
        }
        Ok(())
    }

    /// Fills `out` with one estimate per agent at the rows of `x`.
    fn estimates(&mut self, x: &DMatrix<f64>, gamma: f64, out: &mut DMatrix<f64>) -> Result<(), EngineError> {
        let d = x.ncols();
        for i in 0..x.nrows() {
            let streams = &mut self.streams[i];
            match self.cfg.algorithm {
                Algorithm::OnepointDsgt => {
                    let spec = self.cfg.perturbation.as_ref().expect("validated");
                    fill_perturbation(spec, &mut streams.perturbation, &mut self.phi);
                    for c in 0..d {
                        self.probe[c] = x[(i, c)] + gamma * self.phi[c];
                    }
                    let f = self.obj.query(i, &self.probe, streams)?;
                    for c in 0..d {
                        out[(i, c)] = self.phi[c] * f;
                    }
                }
                Algorithm::DsgtNoisygrad => {
                    for c in 0..d {
                        self.probe[c] = x[(i, c)];
                    }
                    let grad = self.obj.local_gradient(i, &self.probe)?;
                    let std = self.cfg.grad_noise_std;
                    for c in 0..d {
                        let z: f64 = streams.noise.sample(StandardNormal);
                        out[(i, c)] = grad[c] + std * z;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `cfg.max_iters` rounds, calling `observer` after initialization and
/// after every round. On failure the observer keeps everything seen so far.
pub fn run_with<O: Observer + ?Sized>(
    obj: &Objective,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
    observer: &mut O,
) -> Result<SwarmState, EngineError> {
    let mut sim = Simulation::init(obj, w, cfg)?;
    observer.observe(sim.state())?;
    for _ in 0..cfg.max_iters {
        sim.step()?;
        observer.observe(sim.state())?;
    }
    Ok(sim.into_state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::sample_perturbation;
    use crate::objective::{make_quadratic, make_quadratic_with, QuadraticSpec};
    use crate::topology::{distance_to_mean, erdos_renyi, metropolis_weights, spectral_contraction, Topology};

    fn setup(n: usize, d: usize, seed: u64) -> (Objective, MixingMatrix) {
        let obj = make_quadratic(n, d, 3.0, seed).unwrap();
        let w = metropolis_weights(&erdos_renyi(n, 0.5, seed).unwrap()).unwrap();
        (obj, w)
    }

    fn onepoint_cfg(d: usize, seed: u64, iters: u64) -> AlgoConfig {
        AlgoConfig::onepoint(
            Schedule::new(0.2, 0.75, 1.0, 0.25).unwrap(),
            PerturbationSpec::new(d, 1.0).unwrap(),
            seed,
            iters,
        )
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>, scale: f64) -> f64 {
        (a - b).norm() / scale.max(b.norm()).max(1e-300)
    }

    #[test]
    fn init_sets_tracker_to_estimates() {
        let (obj, w) = setup(5, 3, 1);
        let sim = Simulation::init(&obj, &w, &onepoint_cfg(3, 4, 0)).unwrap();
        let s = sim.state();
        assert_eq!(s.y, s.g_prev);
        assert_eq!(s.y_bar(), s.g_bar());
        assert!(s.x.amax() <= 0.5);

        let mut cfg = onepoint_cfg(3, 4, 0);
        cfg.x0_box = 0.0;
        let sim = Simulation::init(&obj, &w, &cfg).unwrap();
        assert_eq!(sim.state().x, DMatrix::zeros(5, 3));
    }

    #[test]
    fn init_rejects_mismatches() {
        let (obj, w) = setup(5, 3, 1);
        assert!(Simulation::init(&obj, &w, &onepoint_cfg(4, 0, 0)).is_err());
        let w2 = metropolis_weights(&Topology::complete(4).unwrap()).unwrap();
        assert!(Simulation::init(&obj, &w2, &onepoint_cfg(3, 0, 0)).is_err());
        let mut cfg = onepoint_cfg(3, 0, 0);
        cfg.perturbation = None;
        assert!(Simulation::init(&obj, &w, &cfg).is_err());
    }

    #[test]
    fn conservation_and_mean_dynamics() {
        let (obj, w) = setup(8, 4, 2);
        let mut sim = Simulation::init(&obj, &w, &onepoint_cfg(4, 9, 0)).unwrap();
        for _ in 0..2000 {
            let before = sim.state().clone();
            let alpha = sim.config().schedule.alpha(before.k);
            sim.step().unwrap();
            let s = sim.state();
            let scale = s.g_prev.row_iter().map(|r| r.norm()).sum::<f64>() / s.n() as f64;
            assert!(rel(&s.y_bar(), &s.g_bar(), scale) < 1e-12);
            let predicted = before.x_bar() - before.y_bar() * alpha;
            assert!(rel(&s.x_bar(), &predicted, 1.0) < 1e-12);
        }
    }

    #[test]
    fn consensus_contraction_skeleton() {
        let (obj, w) = setup(10, 3, 3);
        let rho = w.rho_w();
        let q = w.consensus_factor();
        let coef = (1.0 + rho * rho) * rho * rho / (1.0 - rho * rho);
        let mut sim = Simulation::init(&obj, &w, &onepoint_cfg(3, 5, 0)).unwrap();
        for _ in 0..3000 {
            let before = sim.state().clone();
            let alpha = sim.config().schedule.alpha(before.k);
            sim.step().unwrap();
            let lhs = distance_to_mean(&sim.state().x).powi(2);
            let rhs =
                q * distance_to_mean(&before.x).powi(2) + alpha * alpha * coef * distance_to_mean(&before.y).powi(2);
            assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-300, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn single_agent_matches_plain_zero_order_descent() {
        let obj = make_quadratic(1, 3, 2.0, 7).unwrap();
        let w = MixingMatrix::identity_single();
        let cfg = onepoint_cfg(3, 21, 500);
        let sched = cfg.schedule;
        let spec = cfg.perturbation.unwrap();

        let mut sim = Simulation::init(&obj, &w, &cfg).unwrap();
        let x0 = sim.state().x.row(0).transpose();
        for _ in 0..500 {
            sim.step().unwrap();
        }

        // Independent single-agent loop on the same streams.
        let mut streams = AgentStreams::new(21, 0);
        let mut x = x0;
        let phi = sample_perturbation(&spec, &mut streams.perturbation);
        let mut g = &phi * obj.query(0, &(&x + &phi * sched.gamma(0)), &mut streams).unwrap();
        for k in 0..500u64 {
            x -= &g * sched.alpha(k);
            let phi = sample_perturbation(&spec, &mut streams.perturbation);
            g = &phi * obj.query(0, &(&x + &phi * sched.gamma(k + 1)), &mut streams).unwrap();
        }
        let s = sim.state();
        assert!((s.x.row(0).transpose() - &x).amax() < 1e-12);
        assert!((s.y.row(0).transpose() - &g).amax() < 1e-12);
    }

    #[test]
    fn zero_steps_reach_consensus_at_rate_rho() {
        let obj = make_quadratic_with(&QuadraticSpec {
            n_agents: 8,
            dim: 2,
            condition: 1.0,
            center_spread: 1.0,
            s_variance: 0.0,
            noise_variance: 0.0,
            seed: 0,
        })
        .unwrap();
        let w = metropolis_weights(&Topology::ring(8).unwrap()).unwrap();
        let mut cfg = onepoint_cfg(2, 3, 0);
        cfg.schedule = Schedule::relaxed(0.0, 0.0, 1.0, 0.0).unwrap();
        let mut sim = Simulation::init(&obj, &w, &cfg).unwrap();
        let mean0 = sim.state().x_bar();

        // Power-iteration oracle on W − J/n.
        let n = 8;
        let dev = w.weights() - DMatrix::from_element(n, n, 1.0 / n as f64);
        let mut v = DVector::from_fn(n, |i, _| (i as f64 + 1.0).sin());
        let mut rho_power = 0.0;
        for _ in 0..2000 {
            let next = &dev * &v;
            rho_power = next.norm() / v.norm();
            v = next / rho_power;
        }
        assert!((rho_power - spectral_contraction(w.weights()).unwrap()).abs() < 1e-8);

        let mut prev = distance_to_mean(&sim.state().x);
        let mut ratio = 0.0;
        for _ in 0..60 {
            sim.step().unwrap();
            let now = distance_to_mean(&sim.state().x);
            ratio = now / prev;
            assert!(ratio <= rho_power + 1e-9);
            prev = now;
        }
        assert!((ratio - rho_power).abs() < 1e-3, "{ratio} vs {rho_power}");
        assert!((sim.state().x_bar() - mean0).amax() < 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        let (obj, w) = setup(4, 3, 5);
        let cfg = onepoint_cfg(3, 11, 300);
        let a = run_with(&obj, &w, &cfg, &mut |_: &SwarmState| Ok(())).unwrap();
        let b = run_with(&obj, &w, &cfg, &mut |_: &SwarmState| Ok(())).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(a, run_with(&obj, &w, &other, &mut |_: &SwarmState| Ok(())).unwrap());
    }

    #[test]
    fn observer_sees_every_round() {
        let (obj, w) = setup(3, 2, 5);
        let mut seen = Vec::new();
        run_with(&obj, &w, &onepoint_cfg(2, 0, 25), &mut |s: &SwarmState| {
            seen.push(s.k);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (0..=25).collect::<Vec<u64>>());
    }

    #[test]
    fn huge_steps_are_reported_as_divergence() {
        let (obj, w) = setup(4, 3, 5);
        let mut cfg = onepoint_cfg(3, 0, 10_000);
        cfg.schedule = Schedule::relaxed(50.0, 0.0, 1.0, 0.0).unwrap();
        let mut last = 0;
        let err = run_with(&obj, &w, &cfg, &mut |s: &SwarmState| {
            last = s.k;
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, EngineError::Diverged { .. }));
        assert!(last > 0 && last < 10_000);
    }

    #[test]
    fn noisy_gradient_baseline_reduces_loss() {
        let (obj, w) = setup(6, 4, 8);
        let xs = obj.x_star().unwrap();
        let cfg = AlgoConfig::noisy_gradient(Schedule::relaxed(0.5, 0.75, 1.0, 0.25).unwrap(), 1.0, 2, 20_000);
        let start = Simulation::init(&obj, &w, &cfg).unwrap().state().x_bar();
        let end = run_with(&obj, &w, &cfg, &mut |_: &SwarmState| Ok(())).unwrap().x_bar();
        let f_star = obj.global_value(&xs).unwrap();
        let gap0 = obj.global_value(&start).unwrap() - f_star;
        let gap1 = obj.global_value(&end).unwrap() - f_star;
        assert!(gap1 < 0.05 * gap0, "{gap1} vs {gap0}");
    }
}
