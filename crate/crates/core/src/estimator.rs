//! One-point zero-order gradient estimation and step-size schedules.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{ObjectiveError, ZeroOrderOracle};
use crate::streams::AgentStreams;

/// Largest dimension for which the exact 2^d conditional mean is computed.
pub const EXACT_MEAN_MAX_DIM: usize = 12;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("perturbation radius must be > 0, got {0}")]
    NonPositiveGamma(f64),
    #[error("exact enumeration needs d <= {EXACT_MEAN_MAX_DIM}, got {0}")]
    DimensionTooLarge(usize),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Step sizes `α_k = α₀(k+1)^−υ₁` and perturbation radii `γ_k = γ₀(k+1)^−υ₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha0: f64,
    pub upsilon1: f64,
    pub gamma0: f64,
    pub upsilon2: f64,
}

impl Schedule {
    /// Schedule inside the convergence regime `0.5 < υ₁ < 1`, `0 < υ₂ ≤ 1 − υ₁`.
    pub fn new(alpha0: f64, upsilon1: f64, gamma0: f64, upsilon2: f64) -> Result<Self, EstimatorError> {
        let s = Schedule::relaxed(alpha0, upsilon1, gamma0, upsilon2)?;
        s.check_regime()?;
        if !(alpha0 > 0.0) {
            return Err(EstimatorError::InvalidSchedule(format!(
                "alpha0 must be > 0, got {alpha0}"
            )));
        }
        Ok(s)
    }

    /// Any finite schedule with `α₀ ≥ 0`, `γ₀ > 0` and nonnegative exponents.
    /// Used for baselines and degenerate test configurations.
    pub fn relaxed(alpha0: f64, upsilon1: f64, gamma0: f64, upsilon2: f64) -> Result<Self, EstimatorError> {
        let all_finite = [alpha0, upsilon1, gamma0, upsilon2].iter().all(|v| v.is_finite());
        if !all_finite || alpha0 < 0.0 || upsilon1 < 0.0 || upsilon2 < 0.0 || !(gamma0 > 0.0) {
            return Err(EstimatorError::InvalidSchedule(format!(
                "need finite alpha0 >= 0, gamma0 > 0 and exponents >= 0; got \
                 alpha0 = {alpha0}, upsilon1 = {upsilon1}, gamma0 = {gamma0}, upsilon2 = {upsilon2}"
            )));
        }
        Ok(Schedule {
            alpha0,
            upsilon1,
            gamma0,
            upsilon2,
        })
    }

    pub fn check_regime(&self) -> Result<(), EstimatorError> {
        let Schedule {
            upsilon1: u1,
            upsilon2: u2,
            ..
        } = *self;
        if !(u1 > 0.5 && u1 < 1.0) {
            return Err(EstimatorError::InvalidSchedule(format!(
                "upsilon1 must lie in (0.5, 1), got {u1}"
            )));
        }
        if !(u2 > 0.0 && u2 <= 1.0 - u1 + 1e-12) {
            return Err(EstimatorError::InvalidSchedule(format!(
                "upsilon2 must lie in (0, 1 - upsilon1] = (0, {}], got {u2}",
                1.0 - u1
            )));
        }
        Ok(())
    }

    pub fn in_regime(&self) -> bool {
        self.check_regime().is_ok()
    }

    pub fn alpha(&self, k: u64) -> f64 {
        self.alpha0 * ((k + 1) as f64).powf(-self.upsilon1)
    }

    pub fn gamma(&self, k: u64) -> f64 {
        self.gamma0 * ((k + 1) as f64).powf(-self.upsilon2)
    }

    /// `(α_k, γ_k)`.
    pub fn step_sizes(&self, k: u64) -> (f64, f64) {
        (self.alpha(k), self.gamma(k))
    }

    /// Exponent `min{2υ₂, υ₁ − υ₂}` of the mean-square rate.
    pub fn rate_exponent(&self) -> f64 {
        (2.0 * self.upsilon2).min(self.upsilon1 - self.upsilon2)
    }
}

/// Scaled symmetric Bernoulli perturbation `Φ ∈ scale·{−1/√d, +1/√d}^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub dim: usize,
    pub scale: f64,
    /// Second moment of each coordinate, `scale²/d`.
    pub alpha2: f64,
    /// Norm of every draw, `scale`.
    pub alpha3: f64,
}

impl PerturbationSpec {
    pub fn new(dim: usize, scale: f64) -> Result<Self, EstimatorError> {
        if dim == 0 {
            return Err(EstimatorError::InvalidPerturbation("dimension must be >= 1".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(EstimatorError::InvalidPerturbation(format!(
                "scale must be > 0, got {scale}"
            )));
        }
        Ok(PerturbationSpec {
            dim,
            scale,
            alpha2: scale * scale / dim as f64,
            alpha3: scale,
        })
    }

    /// Magnitude of every coordinate.
    pub fn coordinate(&self) -> f64 {
        self.scale / (self.dim as f64).sqrt()
    }
}

/// Draws one perturbation direction.
pub fn sample_perturbation<R: Rng + ?Sized>(spec: &PerturbationSpec, rng: &mut R) -> DVector<f64> {
    let mut phi = DVector::zeros(spec.dim);
    fill_perturbation(spec, rng, phi.as_mut_slice());
    phi
}

/// In-place variant of [`sample_perturbation`]; consumes one `u64` per 64
/// coordinates.
pub fn fill_perturbation<R: Rng + ?Sized>(spec: &PerturbationSpec, rng: &mut R, out: &mut [f64]) {
    let c = spec.coordinate();
    for chunk in out.chunks_mut(64) {
        let bits: u64 = rng.random();
        for (b, v) in chunk.iter_mut().enumerate() {
            *v = if (bits >> b) & 1 == 1 { c } else { -c };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub g: DVector<f64>,
    /// `x + γΦ`, the single point that was queried.
    pub probe_point: DVector<f64>,
    pub phi: DVector<f64>,
    pub f_value: f64,
}

/// One-point estimate `g = Φ·f̃(x + γΦ)` using exactly one oracle query.
pub fn estimate<O: ZeroOrderOracle + ?Sized>(
    oracle: &O,
    agent: usize,
    x: &DVector<f64>,
    gamma: f64,
    spec: &PerturbationSpec,
    streams: &mut AgentStreams,
) -> Result<GradientEstimate, EstimatorError> {
    if !(gamma > 0.0) {
        return Err(EstimatorError::NonPositiveGamma(gamma));
    }
    if x.len() != spec.dim {
        return Err(ObjectiveError::DimensionMismatch {
            expected: spec.dim,
            got: x.len(),
        }
        .into());
    }
    let phi = sample_perturbation(spec, &mut streams.perturbation);
    let probe_point = x + &phi * gamma;
    let f_value = oracle.query(agent, &probe_point, streams)?;
    Ok(GradientEstimate {
        g: &phi * f_value,
        probe_point,
        phi,
        f_value,
    })
}

/// Upper bound `γ·α₃³·α₁/(2α₂)` on the norm of the estimator bias.
pub fn bias_bound(gamma: f64, spec: &PerturbationSpec, alpha1: f64) -> f64 {
    gamma * spec.alpha3.powi(3) * alpha1 / (2.0 * spec.alpha2)
}

/// Exact `E_Φ[Φ·F(x + γΦ)]` by enumerating all `2^d` sign patterns.
pub fn exact_conditional_mean<F>(
    f: F,
    x: &DVector<f64>,
    gamma: f64,
    spec: &PerturbationSpec,
) -> Result<DVector<f64>, EstimatorError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let d = spec.dim;
    if d > EXACT_MEAN_MAX_DIM {
        return Err(EstimatorError::DimensionTooLarge(d));
    }
    let c = spec.coordinate();
    let mut total = DVector::zeros(d);
    let mut phi = DVector::zeros(d);
    for mask in 0u32..(1 << d) {
        for b in 0..d {
            phi[b] = if (mask >> b) & 1 == 1 { c } else { -c };
        }
        let value = f(&(x + &phi * gamma));
        total.axpy(value, &phi, 1.0);
    }
    Ok(total / f64::from(1u32 << d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{make_quadratic, make_quadratic_with, NoiseSpec, Objective, QuadraticSpec};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    struct Constant {
        value: f64,
        dim: usize,
        calls: Cell<usize>,
    }

    impl ZeroOrderOracle for Constant {
        fn dim(&self) -> usize {
            self.dim
        }
        fn n_agents(&self) -> usize {
            1
        }
        fn query(&self, _: usize, _: &DVector<f64>, _: &mut AgentStreams) -> Result<f64, ObjectiveError> {
            self.calls.set(self.calls.get() + 1);
            Ok(self.value)
        }
    }

    #[test]
    fn step_size_values() {
        let s = Schedule::new(0.2, 0.75, 1.3, 0.25).unwrap();
        assert_eq!(s.alpha(0), 0.2);
        assert_eq!(s.gamma(0), 1.3);
        assert_abs_diff_eq!(s.alpha(5), 0.2 * 6f64.powf(-0.75), epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha(5), 0.0521695, epsilon = 1e-7);
        for k in 0..1000 {
            assert!(s.alpha(k + 1) < s.alpha(k) && s.gamma(k + 1) < s.gamma(k));
        }
        assert_eq!(s.rate_exponent(), 0.5);
        let slow = Schedule::new(0.2, 0.9, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(slow.rate_exponent(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn schedule_regime_is_enforced() {
        assert!(Schedule::new(0.2, 0.4, 1.0, 0.3).is_err());
        assert!(Schedule::new(0.2, 0.75, 1.0, 0.3).is_err());
        assert!(Schedule::new(0.2, 0.75, 1.0, 0.0).is_err());
        assert!(Schedule::new(0.0, 0.75, 1.0, 0.25).is_err());
        assert!(Schedule::relaxed(0.0, 0.0, 1.0, 0.0).is_ok());
        assert!(Schedule::relaxed(0.1, 0.75, 0.0, 0.25).is_err());
    }

    #[test]
    fn perturbation_shape() {
        let one = PerturbationSpec::new(1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let v = sample_perturbation(&one, &mut rng)[0];
            assert!(v == 1.0 || v == -1.0);
        }
        let spec = PerturbationSpec::new(10, 1.5).unwrap();
        let phi = sample_perturbation(&spec, &mut rng);
        assert_relative_eq!(phi.norm(), 1.5, max_relative = 1e-14);
        assert_abs_diff_eq!(spec.alpha2, 0.225, epsilon = 1e-15);
        assert!(PerturbationSpec::new(0, 1.0).is_err());
        assert!(PerturbationSpec::new(3, -1.0).is_err());
    }

    #[test]
    fn perturbation_moments() {
        let spec = PerturbationSpec::new(10, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut second = DVector::zeros(10);
        let mut cross = 0.0;
        for _ in 0..draws {
            let phi = sample_perturbation(&spec, &mut rng);
            second += phi.component_mul(&phi);
            cross += phi[0] * phi[1];
        }
        for v in (second / draws as f64).iter() {
            assert!((v - spec.alpha2).abs() <= 0.02 * spec.alpha2);
        }
        // Cross moment has standard deviation alpha2/sqrt(draws).
        assert!((cross / draws as f64).abs() < 5.0 * spec.alpha2 / (draws as f64).sqrt());
    }

    #[test]
    fn constant_objective_estimate_has_zero_mean() {
        let oracle = Constant {
            value: 3.0,
            dim: 4,
            calls: Cell::new(0),
        };
        let spec = PerturbationSpec::new(4, 1.0).unwrap();
        let mut streams = AgentStreams::new(2, 0);
        let x = DVector::zeros(4);
        let n = 10_000;
        let mut sum = DVector::zeros(4);
        for _ in 0..n {
            let est = estimate(&oracle, 0, &x, 0.5, &spec, &mut streams).unwrap();
            assert_eq!(est.g, &est.phi * 3.0);
            sum += est.g;
        }
        assert_eq!(oracle.calls.get(), n);
        // Each coordinate is ±1.5 with zero mean, so SE = 1.5/√n.
        let se = 1.5 / (n as f64).sqrt();
        assert!((sum / n as f64).amax() <= 3.0 * se);
    }

    #[test]
    fn single_query_per_estimate() {
        let oracle = Constant {
            value: 1.0,
            dim: 3,
            calls: Cell::new(0),
        };
        let spec = PerturbationSpec::new(3, 1.0).unwrap();
        let mut streams = AgentStreams::new(0, 0);
        estimate(&oracle, 0, &DVector::zeros(3), 0.1, &spec, &mut streams).unwrap();
        assert_eq!(oracle.calls.get(), 1);
        assert!(estimate(&oracle, 0, &DVector::zeros(3), 0.0, &spec, &mut streams).is_err());
        assert_eq!(oracle.calls.get(), 1);
    }

    #[test]
    fn estimate_queries_at_probe_point() {
        let obj = make_quadratic(2, 3, 2.0, 0).unwrap();
        let spec = PerturbationSpec::new(3, 1.5).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.1, -0.3]);
        let est = estimate(&obj, 1, &x, 0.7, &spec, &mut AgentStreams::new(5, 1)).unwrap();
        assert_eq!(est.probe_point, &x + &est.phi * 0.7);
        assert_eq!(est.g, &est.phi * est.f_value);
    }

    #[test]
    fn bias_bound_arithmetic() {
        let spec = PerturbationSpec::new(10, 1.0).unwrap();
        assert_eq!(bias_bound(0.0, &spec, 1.0), 0.0);
        assert_abs_diff_eq!(bias_bound(0.1, &spec, 1.0), 0.5, epsilon = 1e-14);
        let s = Schedule::new(0.2, 0.75, 1.3, 0.25).unwrap();
        for k in 0..100 {
            assert!(bias_bound(s.gamma(k + 1), &spec, 2.0) < bias_bound(s.gamma(k), &spec, 2.0));
        }
    }

    #[test]
    fn quadratic_exact_bias_vanishes() {
        // F(x) = ½‖x‖² at x = 0: E[Φ‖γΦ‖²/2] = 0 for every d.
        for d in 1..=10 {
            let spec = PerturbationSpec::new(d, 1.0).unwrap();
            let x = DVector::zeros(d);
            let mean = exact_conditional_mean(|p| 0.5 * p.norm_squared(), &x, 0.3, &spec).unwrap();
            assert!(mean.amax() < 1e-15);
        }
        // General quadratic and point: E[g]/(α₂γ) equals the gradient exactly.
        let obj = make_quadratic(1, 6, 5.0, 3).unwrap();
        let spec = PerturbationSpec::new(6, 1.5).unwrap();
        let x = DVector::from_vec(vec![0.5, -0.2, 0.1, 1.0, 0.0, -0.7]);
        let gamma = 0.4;
        let mean = exact_conditional_mean(|p| obj.local_value(0, p).unwrap(), &x, gamma, &spec).unwrap();
        let grad = obj.local_gradient(0, &x).unwrap();
        assert!((mean / (spec.alpha2 * gamma) - grad).amax() < 1e-12);
        assert!(exact_conditional_mean(
            |_| 0.0,
            &DVector::zeros(13),
            0.1,
            &PerturbationSpec::new(13, 1.0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn quadratic_monte_carlo_mean_within_bias_bound() {
        let obj = make_quadratic(1, 4, 3.0, 8).unwrap();
        let a1 = obj.analytic().unwrap().alpha1;
        let spec = PerturbationSpec::new(4, 1.0).unwrap();
        let gamma = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut streams = AgentStreams::new(11, 0);
        let samples = 50_000;
        for _ in 0..10 {
            let x = DVector::from_fn(4, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let grad = obj.local_gradient(0, &x).unwrap();
            let mut sum = DVector::zeros(4);
            let mut sq = DVector::zeros(4);
            for _ in 0..samples {
                let z = estimate(&obj, 0, &x, gamma, &spec, &mut streams).unwrap().g / (spec.alpha2 * gamma);
                sq += z.component_mul(&z);
                sum += z;
            }
            let n = samples as f64;
            let mean = &sum / n;
            let var = (sq / n - mean.component_mul(&mean)) * (n / (n - 1.0));
            let se = (var.sum() / n).sqrt();
            let err = (mean - grad).norm();
            assert!(err <= bias_bound(gamma, &spec, a1) + 3.0 * se, "{err}");
        }
    }

    #[test]
    fn second_moment_bound() {
        let spec_q = QuadraticSpec {
            n_agents: 1,
            dim: 3,
            condition: 4.0,
            center_spread: 1.0,
            s_variance: 0.01,
            noise_variance: 0.5,
            seed: 4,
        };
        let obj: Objective = make_quadratic_with(&spec_q).unwrap();
        let a = obj.analytic().unwrap().clone();
        let NoiseSpec { variance: alpha4 } = obj.noise();
        let spec = PerturbationSpec::new(3, 1.5).unwrap();
        let gamma = 0.5;
        let origin = DVector::zeros(3);
        let c_norm = match obj.kind() {
            crate::objective::ObjectiveKind::Quadratic(p) => p.centers[0].norm(),
            _ => unreachable!(),
        };
        let es2 = 1.0 + spec_q.s_variance;
        let mu = es2 * obj.local_value(0, &origin).unwrap().powi(2);
        let mut streams = AgentStreams::new(3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = DVector::from_fn(3, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let r = x.norm() + gamma * spec.alpha3;
            // On the ball of radius r, |f(·,S)| is Lipschitz with constant s·α₁(r + ‖c‖).
            let l_prime = es2 * (a.alpha1 * (r + c_norm)).powi(2);
            let bound = 2.0 * spec.alpha3.powi(2) * (mu + l_prime * r * r) + spec.alpha3.powi(2) * alpha4;
            let n = 20_000;
            let m2: f64 = (0..n)
                .map(|_| {
                    estimate(&obj, 0, &x, gamma, &spec, &mut streams)
                        .unwrap()
                        .g
                        .norm_squared()
                })
                .sum::<f64>()
                / n as f64;
            assert!(m2 <= bound, "{m2} > {bound}");
        }
    }
}
