//! Metrics, empirical rate fits and the theory-side constants.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_with, AlgoConfig, EngineError, Observer, SwarmState};
use crate::estimator::{bias_bound, estimate, exact_conditional_mean, EstimatorError, PerturbationSpec, Schedule};
use crate::objective::{Dataset, Objective, ObjectiveError};
use crate::streams::AgentStreams;
use crate::topology::{distance_to_mean, MixingMatrix};

/// Upper limit for the threshold scans.
pub const THRESHOLD_SCAN_CAP: u64 = 10_000_000;

/// Fewest points accepted by [`loglog_slope`].
pub const MIN_FIT_POINTS: usize = 10;

const FIT_GRID_POINTS: usize = 200;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("fit window [{lo}, {hi}] holds {points} usable points, need at least {MIN_FIT_POINTS}")]
    TooFewPoints { lo: u64, hi: u64, points: usize },
    #[error("invalid fit window [{0}, {1}]")]
    InvalidWindow(u64, u64),
    #[error("threshold scan exceeded {THRESHOLD_SCAN_CAP} iterations")]
    ScanCapExceeded,
    #[error("A must be > 0, got {0}")]
    NonPositiveA(f64),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("traces disagree: {0}")]
    TraceMismatch(String),
    #[error("objective has no analytic record")]
    NoAnalytic,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// `‖x̄ − x*‖²` for a stacked `n × d` state.
pub fn divergence(x: &DMatrix<f64>, x_star: &DVector<f64>) -> f64 {
    debug_assert_eq!(x.ncols(), x_star.len());
    (x.row_mean().transpose() - x_star).norm_squared()
}

/// `Σᵢ‖xᵢ − x̄‖²`.
pub fn consensus_error(x: &DMatrix<f64>) -> f64 {
    distance_to_mean(x).powi(2)
}

/// Fraction of rows with `sign(Xᵀθ) = label`; a zero margin predicts `+1`.
pub fn accuracy(theta: &DVector<f64>, test: &Dataset) -> Result<f64, AnalysisError> {
    if test.is_empty() {
        return Err(AnalysisError::EmptyTestSet);
    }
    if theta.len() != test.dim() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "theta has {} entries, test set has {} features",
            theta.len(),
            test.dim()
        )));
    }
    let correct = (0..test.len())
        .filter(|&j| {
            let margin: f64 = test.row(j).iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
            let predicted = if margin >= 0.0 { 1.0 } else { -1.0 };
            predicted == test.label(j)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: u64,
    /// `𝓕(x̄_k)`.
    pub loss: f64,
    /// `‖x̄_k − x*‖²`.
    pub divergence: f64,
    /// `Σᵢ‖x_{i,k} − x̄_k‖²`.
    pub consensus: f64,
    /// `Σ_{j≤k}(𝓕(x̄_j) − 𝓕*)`, accumulated over every round.
    pub cum_regret: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Loss,
    Divergence,
    Consensus,
    CumRegret,
    Accuracy,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::Loss,
        Field::Divergence,
        Field::Consensus,
        Field::CumRegret,
        Field::Accuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Loss => "loss",
            Field::Divergence => "divergence",
            Field::Consensus => "consensus",
            Field::CumRegret => "cum_regret",
            Field::Accuracy => "accuracy",
        }
    }

    pub fn get(self, r: &IterationRecord) -> Option<f64> {
        match self {
            Field::Loss => Some(r.loss),
            Field::Divergence => Some(r.divergence),
            Field::Consensus => Some(r.consensus),
            Field::CumRegret => Some(r.cum_regret),
            Field::Accuracy => r.accuracy,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<IterationRecord>,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn has_accuracy(&self) -> bool {
        self.records.first().is_some_and(|r| r.accuracy.is_some())
    }

    pub fn at(&self, k: u64) -> Option<&IterationRecord> {
        self.records
            .binary_search_by_key(&k, |r| r.k)
            .ok()
            .map(|i| &self.records[i])
    }

    /// `(k, value)` pairs of one field.
    pub fn series(&self, field: Field) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| field.get(r).map(|v| (r.k, v)))
            .collect()
    }

    /// Element-wise mean of traces logged on the same iterations.
    pub fn average(traces: &[RunTrace]) -> Result<RunTrace, AnalysisError> {
        let first = traces
            .first()
            .ok_or_else(|| AnalysisError::TraceMismatch("no traces to average".into()))?;
        let count = traces.len() as f64;
        let mut records = first.records.clone();
        for t in &traces[1..] {
            if t.len() != first.len() {
                return Err(AnalysisError::TraceMismatch(format!(
                    "lengths {} and {}",
                    first.len(),
                    t.len()
                )));
            }
            for (acc, r) in records.iter_mut().zip(&t.records) {
                if acc.k != r.k {
                    return Err(AnalysisError::TraceMismatch(format!(
                        "iterations {} and {}",
                        acc.k, r.k
                    )));
                }
                acc.loss += r.loss;
                acc.divergence += r.divergence;
                acc.consensus += r.consensus;
                acc.cum_regret += r.cum_regret;
                acc.accuracy = match (acc.accuracy, r.accuracy) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
            }
        }
        for r in &mut records {
            r.loss /= count;
            r.divergence /= count;
            r.consensus /= count;
            r.cum_regret /= count;
            r.accuracy = r.accuracy.map(|a| a / count);
        }
        Ok(RunTrace { records })
    }
}

/// Quantities used to estimate the unobservable constants of the rate
/// certificate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunStats {
    /// `‖x₀ − 1x̄₀‖²`.
    pub initial_spread: f64,
    /// `max_k ‖ḡ_k‖²`.
    pub max_gbar_sq: f64,
    /// `max_k ‖y_k − 1ȳ_k‖`.
    pub max_tracker_spread: f64,
}

/// Observer that records metrics every `stride` rounds and accumulates
/// regret and [`RunStats`] at every round.
pub struct MetricsRecorder<'a> {
    obj: &'a Objective,
    x_star: DVector<f64>,
    f_star: f64,
    stride: u64,
    final_k: u64,
    test: Option<&'a Dataset>,
    cum_regret: f64,
    pub trace: RunTrace,
    pub stats: RunStats,
}

impl<'a> MetricsRecorder<'a> {
    pub fn new(
        obj: &'a Objective,
        stride: u64,
        final_k: u64,
        test: Option<&'a Dataset>,
    ) -> Result<Self, AnalysisError> {
        let x_star = obj.x_star().ok_or(AnalysisError::NoAnalytic)?;
        let f_star = obj.global_value(&x_star)?;
        Ok(MetricsRecorder {
            obj,
            x_star,
            f_star,
            stride: stride.max(1),
            final_k,
            test,
            cum_regret: 0.0,
            trace: RunTrace::default(),
            stats: RunStats::default(),
        })
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }
}

impl Observer for MetricsRecorder<'_> {
    fn observe(&mut self, state: &SwarmState) -> Result<(), EngineError> {
        let x_bar = state.x_bar();
        let loss = self.obj.global_value(&x_bar)?;
        self.cum_regret += loss - self.f_star;
        let spread = distance_to_mean(&state.x);
        if state.k == 0 {
            self.stats.initial_spread = spread * spread;
        }
        self.stats.max_gbar_sq = self.stats.max_gbar_sq.max(state.g_bar().norm_squared());
        self.stats.max_tracker_spread = self.stats.max_tracker_spread.max(distance_to_mean(&state.y));
        if state.k.is_multiple_of(self.stride) || state.k == self.final_k {
            let accuracy = match self.test {
                Some(t) => Some(accuracy(&x_bar, t).map_err(|e| EngineError::Config(e.to_string()))?),
                None => None,
            };
            self.trace.records.push(IterationRecord {
                k: state.k,
                loss,
                divergence: (&x_bar - &self.x_star).norm_squared(),
                consensus: spread * spread,
                cum_regret: self.cum_regret,
                accuracy,
            });
        }
        Ok(())
    }
}

/// Outcome of one recorded run; `error` is set when the run stopped early.
#[derive(Debug)]
pub struct RecordedRun {
    pub trace: RunTrace,
    pub stats: RunStats,
    pub final_state: Option<SwarmState>,
    pub error: Option<EngineError>,
}

/// Runs `cfg` and records metrics every `stride` rounds.
pub fn record_run(
    obj: &Objective,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
    stride: u64,
    test: Option<&Dataset>,
) -> Result<RecordedRun, AnalysisError> {
    let mut recorder = MetricsRecorder::new(obj, stride, cfg.max_iters, test)?;
    let outcome = run_with(obj, w, cfg, &mut recorder);
    let (final_state, error) = match outcome {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e)),
    };
    Ok(RecordedRun {
        trace: recorder.trace,
        stats: recorder.stats,
        final_state,
        error,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if usable.len() < MIN_FIT_POINTS {
        return Err(AnalysisError::TooFewPoints {
            lo: 0,
            hi: 0,
            points: usable.len(),
        });
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = usable.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = usable.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Log-log slope of `field` over `k ∈ [k_lo, k_hi]`, fitted on points
/// subsampled on a geometric grid. Nonpositive values are skipped.
pub fn loglog_slope(trace: &RunTrace, field: Field, k_lo: u64, k_hi: u64) -> Result<f64, AnalysisError> {
    if k_lo < 1 || k_hi <= k_lo {
        return Err(AnalysisError::InvalidWindow(k_lo, k_hi));
    }
    let series: Vec<(u64, f64)> = trace
        .series(field)
        .into_iter()
        .filter(|&(k, v)| k >= k_lo && k <= k_hi && v > 0.0 && v.is_finite())
        .collect();
    let ratio = (k_hi as f64 / k_lo as f64).ln();
    let mut picked: Vec<usize> = Vec::new();
    for g in 0..FIT_GRID_POINTS {
        let target = k_lo as f64 * (ratio * g as f64 / (FIT_GRID_POINTS - 1) as f64).exp();
        let idx = series.partition_point(|&(k, _)| (k as f64) < target * (1.0 - 1e-12));
        if idx < series.len() && picked.last() != Some(&idx) {
            picked.push(idx);
        }
    }
    if picked.len() < MIN_FIT_POINTS {
        return Err(AnalysisError::TooFewPoints {
            lo: k_lo,
            hi: k_hi,
            points: picked.len(),
        });
    }
    let points: Vec<(f64, f64)> = picked.iter().map(|&i| (series[i].0 as f64, series[i].1)).collect();
    fit_loglog(&points)
}

/// `δ_k = q^k` and `β_k` with `β₀ = 0`, `β_{k+1} = q(β_k + α_k²)`, where
/// `q = (1 + ρ²)/2`, for `k = 0..=k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSequence {
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn beta_sequence(rho_w: f64, schedule: &Schedule, k_max: usize) -> BetaSequence {
    let q = 0.5 * (1.0 + rho_w * rho_w);
    let mut delta = Vec::with_capacity(k_max + 1);
    let mut beta = Vec::with_capacity(k_max + 1);
    let (mut d, mut b) = (1.0, 0.0);
    for k in 0..=k_max {
        delta.push(d);
        beta.push(b);
        let a = schedule.alpha(k as u64);
        b = q * (b + a * a);
        d *= q;
    }
    BetaSequence { delta, beta }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub k0: u64,
    pub k1: u64,
    pub k2: u64,
}

/// `K₀ = min{k : Aα_kγ_k < 1}`, `K₁ = min{k : q^k ≤ α_k²}`, `K₂ = max(K₀, K₁)`.
pub fn thresholds(a: f64, schedule: &Schedule, rho_w: f64) -> Result<Thresholds, AnalysisError> {
    if !(a > 0.0) {
        return Err(AnalysisError::NonPositiveA(a));
    }
    let k0 = (0..=THRESHOLD_SCAN_CAP)
        .find(|&k| a * schedule.alpha(k) * schedule.gamma(k) < 1.0)
        .ok_or(AnalysisError::ScanCapExceeded)?;
    let ln_q = (0.5 * (1.0 + rho_w * rho_w)).ln();
    let k1 = (0..=THRESHOLD_SCAN_CAP)
        .find(|&k| k as f64 * ln_q <= 2.0 * schedule.alpha(k).ln())
        .ok_or(AnalysisError::ScanCapExceeded)?;
    Ok(Thresholds { k0, k1, k2: k0.max(k1) })
}

/// Exact constants of the objective and network that enter the certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub lambda: f64,
    pub smoothness: f64,
    pub alpha1: f64,
    pub alpha1_estimated: bool,
    pub n_agents: usize,
    pub rho_w: f64,
}

impl ProblemConstants {
    pub fn from_objective(obj: &Objective, w: &MixingMatrix) -> Result<Self, AnalysisError> {
        let a = obj.analytic().ok_or(AnalysisError::NoAnalytic)?;
        Ok(ProblemConstants {
            lambda: a.lambda,
            smoothness: a.smoothness,
            alpha1: a.alpha1,
            alpha1_estimated: false,
            n_agents: obj.n_agents(),
            rho_w: w.rho_w(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub k0: u64,
    pub k1: u64,
    pub k2: u64,
    pub r: f64,
    pub m_bar: f64,
    pub g: f64,
    pub g_bar: f64,
    /// `σ₁ … σ₈`.
    pub sigma: [f64; 8],
    /// Last `k` included in the σ maxima.
    pub scan_horizon: u64,
    pub problem: ProblemConstants,
    pub alpha2: f64,
    pub alpha3: f64,
}

/// Safety factor applied to the empirical maxima behind `M̄` and `G`.
pub const SAFETY_FACTOR: f64 = 2.0;

/// Pools per-repetition statistics: `R` is the largest initial spread,
/// `M̄` twice the repetition mean of `max_k‖ḡ_k‖²`, and `G` twice the
/// largest tracker spread.
pub fn pool_stats(stats: &[RunStats]) -> (f64, f64, f64) {
    let r = stats.iter().map(|s| s.initial_spread).fold(0.0, f64::max);
    let m_bar = SAFETY_FACTOR * stats.iter().map(|s| s.max_gbar_sq).sum::<f64>() / stats.len().max(1) as f64;
    let g = SAFETY_FACTOR * stats.iter().map(|s| s.max_tracker_spread).fold(0.0, f64::max);
    (r, m_bar, g)
}

/// Computes `A, B, C`, the thresholds and `σ₁ … σ₈` scanned over
/// `K₀ ≤ k ≤ scan_horizon`.
pub fn theory_constants(
    problem: ProblemConstants,
    spec: &PerturbationSpec,
    schedule: &Schedule,
    stats: &[RunStats],
    scan_horizon: u64,
) -> Result<TheoryConstants, AnalysisError> {
    let a = problem.lambda * spec.alpha2;
    let b = problem.alpha1 * spec.alpha3.powi(3);
    let c = spec.alpha2 * problem.smoothness.powi(2) / (problem.lambda * problem.n_agents as f64);
    let th = thresholds(a, schedule, problem.rho_w)?;
    let (r, m_bar, g) = pool_stats(stats);
    let rho2 = problem.rho_w * problem.rho_w;
    let g_bar = 2.0 * rho2 * g / (1.0 - rho2);

    let q = 0.5 * (1.0 + rho2);
    let mut sigma = [f64::NEG_INFINITY; 8];
    let (mut delta, mut beta) = (1.0f64, 0.0f64);
    for k in 0..=scan_horizon.max(th.k0) {
        let (al, ga) = schedule.step_sizes(k);
        if k >= th.k0 {
            let (al1, ga1) = schedule.step_sizes(k + 1);
            let values = [
                (1.0 - (ga1 / ga).powi(2)) / (al * ga),
                delta / (ga * ga),
                beta / (ga * ga),
                al / ga.powi(3),
                (1.0 - (al1 / ga1) / (al / ga)) / (al * ga),
                (ga.powi(3) / al).sqrt(),
                ga / al * delta,
                ga / al * beta,
            ];
            for (s, v) in sigma.iter_mut().zip(values) {
                *s = s.max(v);
            }
        }
        beta = q * (beta + al * al);
        delta *= q;
    }
    Ok(TheoryConstants {
        a,
        b,
        c,
        k0: th.k0,
        k1: th.k1,
        k2: th.k2,
        r,
        m_bar,
        g,
        g_bar,
        sigma,
        scan_horizon: scan_horizon.max(th.k0),
        problem,
        alpha2: spec.alpha2,
        alpha3: spec.alpha3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub checked: usize,
    pub held: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub note: String,
    pub verdict: String,
    pub constants: TheoryConstants,
    pub schedule: Schedule,
    pub rate_exponent: f64,
    /// `α₀γ₀ ≥ max{2υ₂, υ₁ − υ₂}/A`.
    pub rate_condition: bool,
    pub sigma1_closed_form: f64,
    pub sigma1_within_closed_form: bool,
    pub sigma5_closed_form: f64,
    pub sigma5_within_closed_form: bool,
    /// `k` whose averaged divergence stands in for `D_{K₀}`.
    pub anchor_k: Option<u64>,
    pub varsigma1: Option<f64>,
    pub varsigma2: Option<f64>,
    /// `D_k ≤ ς₁²γ_k²` over logged `k > K₂`.
    pub envelope_gamma: Option<EnvelopeCheck>,
    /// `D_k ≤ ς₂²α_k/γ_k` over logged `k > K₂`.
    pub envelope_ratio: Option<EnvelopeCheck>,
}

pub const CERTIFICATE_NOTE: &str = "M_bar and G are empirical maxima times a safety factor of 2; \
the certificate is a consistency check against the averaged run, not a proof.";

pub const VERDICT_APPLICABLE: &str = "applicable";
pub const VERDICT_INAPPLICABLE: &str = "certificate inapplicable";

fn quadratic_root(linear: f64, constant: f64, gap: f64) -> f64 {
    let h = linear / (2.0 * gap);
    h + (h * h + constant / gap).sqrt()
}

fn envelope<F: Fn(u64) -> f64>(trace: &RunTrace, after: u64, bound: F) -> EnvelopeCheck {
    let mut checked = 0;
    let mut held = 0;
    for r in trace.records.iter().filter(|r| r.k > after) {
        checked += 1;
        if r.divergence <= bound(r.k) {
            held += 1;
        }
    }
    EnvelopeCheck {
        checked,
        held,
        fraction: if checked == 0 {
            0.0
        } else {
            held as f64 / checked as f64
        },
    }
}

/// Evaluates the mean-square rate certificate against an averaged trace.
pub fn rate_certificate(constants: &TheoryConstants, schedule: &Schedule, trace: &RunTrace) -> CertificateReport {
    let tc = constants;
    let [s1, s2, s3, s4, s5, s6, s7, s8] = tc.sigma;
    let prod = schedule.alpha0 * schedule.gamma0;
    let (u1, u2) = (schedule.upsilon1, schedule.upsilon2);
    let sigma1_closed_form = 2.0 * u2 / prod;
    let sigma5_closed_form = (u1 - u2) / prod;

    let anchor = trace.records.iter().find(|r| r.k >= tc.k0);
    let anchor_k = anchor.map(|r| r.k);
    let (ga0, al0) = anchor.map_or((schedule.gamma(tc.k0), schedule.alpha(tc.k0)), |r| {
        (schedule.gamma(r.k), schedule.alpha(r.k))
    });
    let d0 = anchor.map(|r| r.divergence);

    let varsigma1 = match d0 {
        Some(d0) if s1 < tc.a => {
            let tail = quadratic_root(tc.b, tc.c * tc.r * s2 + tc.c * tc.g_bar * s3 + tc.m_bar * s4, tc.a - s1);
            Some((d0.sqrt() / ga0).max(tail))
        }
        _ => None,
    };
    let varsigma2 = match d0 {
        Some(d0) if s5 < tc.a => {
            let tail = quadratic_root(tc.b * s6, tc.c * (tc.r * s7 + tc.g_bar * s8) + tc.m_bar, tc.a - s5);
            Some((d0 * ga0 / al0).sqrt().max(tail))
        }
        _ => None,
    };
    let envelope_gamma = varsigma1.map(|v| envelope(trace, tc.k2, |k| v * v * schedule.gamma(k).powi(2)));
    let envelope_ratio = varsigma2.map(|v| envelope(trace, tc.k2, |k| v * v * schedule.alpha(k) / schedule.gamma(k)));
    let verdict = if s1 >= tc.a && s5 >= tc.a {
        VERDICT_INAPPLICABLE
    } else {
        VERDICT_APPLICABLE
    };
    CertificateReport {
        note: CERTIFICATE_NOTE.into(),
        verdict: verdict.into(),
        constants: tc.clone(),
        schedule: *schedule,
        rate_exponent: schedule.rate_exponent(),
        rate_condition: prod >= (2.0 * u2).max(u1 - u2) / tc.a,
        sigma1_closed_form,
        sigma1_within_closed_form: s1 < sigma1_closed_form,
        sigma5_closed_form,
        sigma5_within_closed_form: s5 < sigma5_closed_form,
        anchor_k,
        varsigma1,
        varsigma2,
        envelope_gamma,
        envelope_ratio,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasProbe {
    /// Mean of `g/(α₂γ)` minus `∇F_i(x)`.
    pub empirical_bias: DVector<f64>,
    pub bound: f64,
    /// Standard error of the Monte-Carlo mean, `sqrt(Σ_c Var(z_c)/N)`.
    pub standard_error: f64,
    pub samples: usize,
}

/// Monte-Carlo bias of the rescaled one-point estimate at `x`.
#[allow(clippy::too_many_arguments)]
pub fn bias_probe(
    obj: &Objective,
    agent: usize,
    x: &DVector<f64>,
    gamma: f64,
    spec: &PerturbationSpec,
    alpha1: f64,
    samples: usize,
    streams: &mut AgentStreams,
) -> Result<BiasProbe, AnalysisError> {
    let d = spec.dim;
    let scale = 1.0 / (spec.alpha2 * gamma);
    let mut sum = DVector::zeros(d);
    let mut sum_sq = DVector::zeros(d);
    for _ in 0..samples {
        let est = estimate(obj, agent, x, gamma, spec, streams)?;
        let z = est.g * scale;
        sum_sq += z.component_mul(&z);
        sum += z;
    }
    let n = samples as f64;
    let mean = &sum / n;
    let var = (sum_sq / n - mean.component_mul(&mean)) * (n / (n - 1.0).max(1.0));
    Ok(BiasProbe {
        empirical_bias: mean - obj.local_gradient(agent, x)?,
        bound: bias_bound(gamma, spec, alpha1),
        standard_error: (var.iter().map(|v| v.max(0.0)).sum::<f64>() / n).sqrt(),
        samples,
    })
}

/// Partial sums of the estimator noise `S_k = Σ_{j<k} α_j e_j`, where
/// `e_j = g_j − E[g_j | x_j]` is computed with the exact sign enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProbe {
    /// `(k, ‖S_k‖_F)` at every round.
    pub partial_sums: Vec<(u64, f64)>,
    /// `(k, sup_{j ≥ k} ‖S_j − S_k‖_F)` at the requested checkpoints.
    pub tail_sups: Vec<(u64, f64)>,
}

pub fn noise_partial_sums(
    obj: &Objective,
    w: &MixingMatrix,
    cfg: &AlgoConfig,
    checkpoints: &[u64],
) -> Result<NoiseProbe, AnalysisError> {
    let spec = cfg
        .perturbation
        .ok_or_else(|| AnalysisError::DimensionMismatch("noise probe needs a one-point configuration".into()))?;
    let (n, d) = (obj.n_agents(), obj.dim());
    let schedule = cfg.schedule;
    let mut running = DMatrix::zeros(n, d);
    let mut sums: Vec<DMatrix<f64>> = Vec::new();
    let mut failure: Option<AnalysisError> = None;
    let mut observer = |s: &SwarmState| -> Result<(), EngineError> {
        sums.push(running.clone());
        let gamma = schedule.gamma(s.k);
        let alpha = schedule.alpha(s.k);
        for i in 0..n {
            let xi = s.x.row(i).transpose();
            let mean = match exact_conditional_mean(|p| obj.local_value(i, p).unwrap_or(f64::NAN), &xi, gamma, &spec) {
                Ok(m) => m,
                Err(e) => {
                    failure = Some(e.into());
                    return Err(EngineError::Config("noise probe failed".into()));
                }
            };
            for c in 0..d {
                running[(i, c)] += alpha * (s.g_prev[(i, c)] - mean[c]);
            }
        }
        Ok(())
    };
    let result = run_with(obj, w, cfg, &mut observer);
    if let Some(e) = failure {
        return Err(e);
    }
    result.map_err(|e| AnalysisError::DimensionMismatch(e.to_string()))?;
    let norms: Vec<(u64, f64)> = sums.iter().enumerate().map(|(k, s)| (k as u64, s.norm())).collect();
    let tail_sups = checkpoints
        .iter()
        .filter(|&&k| (k as usize) < sums.len())
        .map(|&k| {
            let base = &sums[k as usize];
            let sup = sums[k as usize..].iter().map(|s| (s - base).norm()).fold(0.0, f64::max);
            (k, sup)
        })
        .collect();
    Ok(NoiseProbe {
        partial_sums: norms,
        tail_sups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{make_quadratic, make_quadratic_with, QuadraticSpec};
    use crate::topology::{erdos_renyi, metropolis_weights};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_trace(f: impl Fn(f64) -> f64, ks: impl Iterator<Item = u64>) -> RunTrace {
        RunTrace {
            records: ks
                .map(|k| IterationRecord {
                    k,
                    loss: f(k as f64),
                    divergence: f(k as f64),
                    consensus: f(k as f64),
                    cum_regret: f(k as f64),
                    accuracy: None,
                })
                .collect(),
        }
    }

    #[test]
    fn divergence_examples() {
        let xs = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let at_star = DMatrix::from_fn(4, 3, |_, c| xs[c]);
        assert_eq!(divergence(&at_star, &xs), 0.0);
        let shifted = DMatrix::from_fn(4, 3, |_, c| xs[c] + if c == 0 { 1.0 } else { 0.0 });
        assert_abs_diff_eq!(divergence(&shifted, &xs), 1.0, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let mut naive = 0.0;
        for c in 0..3 {
            let mut m = 0.0;
            for i in 0..5 {
                m += x[(i, c)];
            }
            naive += (m / 5.0 - xs[c]).powi(2);
        }
        assert_abs_diff_eq!(divergence(&x, &xs), naive, epsilon = 1e-12);
    }

    #[test]
    fn consensus_examples() {
        let same = DMatrix::from_fn(3, 2, |_, c| c as f64);
        assert_eq!(consensus_error(&same), 0.0);
        let v = [0.3, -1.2];
        let pm = DMatrix::from_fn(2, 2, |i, c| if i == 0 { v[c] } else { -v[c] });
        assert_abs_diff_eq!(consensus_error(&pm), 2.0 * (0.09 + 1.44), epsilon = 1e-14);

        let w = metropolis_weights(&erdos_renyi(8, 0.4, 1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(8, 3, |_, _| rng.random::<f64>());
        let mixed = w.weights() * &x;
        assert!(consensus_error(&mixed) <= w.rho_w().powi(2) * consensus_error(&x) + 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        let data = Dataset::synthetic_two_class(200, 3, 2.0, 4).unwrap();
        let pos = data.labels().iter().filter(|&&l| l > 0.0).count() as f64 / 200.0;
        assert_eq!(accuracy(&DVector::zeros(3), &data).unwrap(), pos);

        let theta = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let a = accuracy(&theta, &data).unwrap();
        let b = accuracy(&(-&theta), &data).unwrap();
        assert_abs_diff_eq!(a + b, 1.0, epsilon = 1e-15);

        // Labels assigned by a known separator.
        let sep = DVector::from_vec(vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        while labels.len() < 100 {
            let p = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
            let m = p[0] * sep[0] + p[1] * sep[1];
            if m.abs() > 0.05 {
                feats.extend_from_slice(&p);
                labels.push(m.signum());
            }
        }
        let separable = Dataset::new(2, feats, labels).unwrap();
        assert_eq!(accuracy(&sep, &separable).unwrap(), 1.0);
        let empty = Dataset::new(2, vec![], vec![]).unwrap();
        assert!(accuracy(&sep, &empty).is_err());
    }

    #[test]
    fn slope_of_power_laws() {
        let t = synthetic_trace(|k| 3.0 / k, 1..=100_000);
        assert_abs_diff_eq!(
            loglog_slope(&t, Field::Loss, 10, 100_000).unwrap(),
            -1.0,
            epsilon = 1e-6
        );
        let t = synthetic_trace(|k| 0.7 / k.sqrt(), (1..=2000).map(|j| j * 50));
        assert_abs_diff_eq!(
            loglog_slope(&t, Field::Divergence, 100, 100_000).unwrap(),
            -0.5,
            epsilon = 1e-6
        );
    }

    #[test]
    fn slope_rejects_thin_windows() {
        let t = synthetic_trace(|k| 1.0 / k, 1..=5);
        assert!(matches!(
            loglog_slope(&t, Field::Loss, 1, 5),
            Err(AnalysisError::TooFewPoints { .. })
        ));
        let t = synthetic_trace(|k| if k > 45.0 { -1.0 } else { 1.0 / k }, 1..=100);
        assert!(loglog_slope(&t, Field::Loss, 40, 100).is_err());
        assert!(loglog_slope(&t, Field::Loss, 0, 100).is_err());
    }

    fn brute_beta(rho: f64, s: &Schedule, k: usize) -> f64 {
        let q: f64 = 0.5 * (1.0 + rho * rho);
        (1..=k)
            .map(|j| q.powi(j as i32) * s.alpha((k - j) as u64).powi(2))
            .sum()
    }

    #[test]
    fn beta_recursion_matches_definition() {
        let s = Schedule::new(0.2, 0.75, 1.3, 0.25).unwrap();
        for rho in [0.0, 0.5, 0.9] {
            let seq = beta_sequence(rho, &s, 500);
            assert_eq!(seq.beta[0], 0.0);
            for k in 1..=500 {
                let b = brute_beta(rho, &s, k);
                assert!((seq.beta[k] - b).abs() <= 1e-12 * b, "rho {rho} k {k}");
                approx::assert_relative_eq!(
                    seq.delta[k],
                    (0.5 * (1.0 + rho * rho)).powi(k as i32),
                    max_relative = 1e-12
                );
            }
        }
        let seq = beta_sequence(0.0, &s, 1);
        assert_abs_diff_eq!(seq.beta[1], 0.02, epsilon = 1e-16);
    }

    #[test]
    fn threshold_scans() {
        let s = Schedule::new(0.2, 0.75, 1.3, 0.25).unwrap();
        assert_eq!(thresholds(1.0, &s, 0.5).unwrap().k0, 0);
        let big = thresholds(100.0, &s, 0.5).unwrap();
        assert!(100.0 * s.alpha(big.k0) * s.gamma(big.k0) < 1.0);
        assert!(100.0 * s.alpha(big.k0 - 1) * s.gamma(big.k0 - 1) >= 1.0);
        for rho in [0.0, 0.9] {
            let t = thresholds(1.0, &s, rho).unwrap();
            let q: f64 = 0.5 * (1.0 + rho * rho);
            assert!(q.powi(t.k1 as i32) <= s.alpha(t.k1).powi(2));
            assert!(q.powi(t.k1 as i32 - 1) > s.alpha(t.k1 - 1).powi(2));
            assert_eq!(t.k2, t.k0.max(t.k1));
        }
        assert_eq!(thresholds(1.0, &s, 0.0).unwrap().k1, 10);
        assert!(thresholds(0.0, &s, 0.5).is_err());
    }

    #[test]
    fn beta_rate() {
        let s = Schedule::new(0.2, 0.75, 1.3, 0.25).unwrap();
        let rho = 0.9;
        let k1 = thresholds(1.0, &s, rho).unwrap().k1;
        let seq = beta_sequence(rho, &s, 10_000);
        let pts: Vec<(f64, f64)> = (k1 as usize..=10_000)
            .step_by(7)
            .map(|k| (k as f64, seq.beta[k]))
            .collect();
        assert!(fit_loglog(&pts).unwrap() <= -(3.0 * 0.75 - 1.0) + 0.1);
    }

    #[test]
    fn sigma_closed_forms_hold() {
        for (u1, u2) in [(0.75, 0.25), (0.9, 0.1), (0.6, 0.3)] {
            let s = Schedule::new(0.4, u1, 1.2, u2).unwrap();
            let problem = ProblemConstants {
                lambda: 1.0,
                smoothness: 2.0,
                alpha1: 2.0,
                alpha1_estimated: false,
                n_agents: 4,
                rho_w: 0.6,
            };
            let spec = PerturbationSpec::new(4, 1.0).unwrap();
            let tc = theory_constants(problem, &spec, &s, &[RunStats::default()], 50_000).unwrap();
            assert!(tc.sigma[0] < 2.0 * u2 / (0.4 * 1.2));
            assert!(tc.sigma[4] < (u1 - u2) / (0.4 * 1.2));
            assert!(tc.sigma.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn average_aligns_on_k() {
        let a = synthetic_trace(|k| k, 1..=3);
        let b = synthetic_trace(|k| 3.0 * k, 1..=3);
        let m = RunTrace::average(&[a.clone(), b]).unwrap();
        assert_eq!(m.records[2].loss, 6.0);
        let short = synthetic_trace(|k| k, 1..=2);
        assert!(RunTrace::average(&[a, short]).is_err());
    }

    #[test]
    fn recorder_accumulates_regret_every_round() {
        let obj = make_quadratic(4, 3, 2.0, 1).unwrap();
        let w = metropolis_weights(&erdos_renyi(4, 0.6, 2).unwrap()).unwrap();
        let cfg = AlgoConfig::onepoint(
            Schedule::new(0.2, 0.75, 1.0, 0.25).unwrap(),
            PerturbationSpec::new(3, 1.0).unwrap(),
            3,
            95,
        );
        let strided = record_run(&obj, &w, &cfg, 10, None).unwrap();
        let every = record_run(&obj, &w, &cfg, 1, None).unwrap();
        let ks: Vec<u64> = strided.trace.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95]);
        for r in &strided.trace.records {
            assert_eq!(Some(r), every.trace.at(r.k));
        }
        let regrets: Vec<f64> = every.trace.series(Field::CumRegret).into_iter().map(|p| p.1).collect();
        assert!(regrets.windows(2).all(|p| p[1] - p[0] >= -1e-12));
        assert!(strided.error.is_none());
    }

    #[test]
    fn rate_certificate_is_well_formed_on_complete_graph() {
        let obj = make_quadratic(3, 2, 2.0, 4).unwrap();
        let w = metropolis_weights(&crate::topology::Topology::complete(3).unwrap()).unwrap();
        assert!(w.rho_w() < 1e-12);
        let s = Schedule::new(2.0, 0.75, 1.0, 0.25).unwrap();
        let spec = PerturbationSpec::new(2, 1.0).unwrap();
        let cfg = AlgoConfig::onepoint(s, spec, 1, 2000);
        let run = record_run(&obj, &w, &cfg, 10, None).unwrap();
        let problem = ProblemConstants::from_objective(&obj, &w).unwrap();
        let tc = theory_constants(problem, &spec, &s, &[run.stats], 2000).unwrap();
        let seq = beta_sequence(0.0, &s, 3);
        assert_abs_diff_eq!(seq.beta[1], 0.5 * s.alpha(0).powi(2), epsilon = 1e-15);
        let report = rate_certificate(&tc, &s, &run.trace);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"verdict\""));
        assert!(report.constants.g_bar.abs() < 1e-20);
    }

    #[test]
    fn inapplicable_certificate_is_a_verdict() {
        let s = Schedule::new(0.01, 0.75, 0.01, 0.25).unwrap();
        let problem = ProblemConstants {
            lambda: 1.0,
            smoothness: 1.0,
            alpha1: 1.0,
            alpha1_estimated: false,
            n_agents: 2,
            rho_w: 0.5,
        };
        let spec = PerturbationSpec::new(2, 1.0).unwrap();
        let tc = theory_constants(problem, &spec, &s, &[RunStats::default()], 1000).unwrap();
        let report = rate_certificate(&tc, &s, &RunTrace::default());
        assert_eq!(report.verdict, VERDICT_INAPPLICABLE);
        assert!(!report.rate_condition);
    }

    #[test]
    fn quadratic_bias_probe_is_zero_within_noise() {
        let obj = make_quadratic(2, 3, 4.0, 6).unwrap();
        let spec = PerturbationSpec::new(3, 1.0).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.1, 0.2]);
        let mut streams = AgentStreams::new(9, 1);
        let p = bias_probe(
            &obj,
            1,
            &x,
            0.2,
            &spec,
            obj.analytic().unwrap().alpha1,
            100_000,
            &mut streams,
        )
        .unwrap();
        assert!(p.empirical_bias.norm() <= 3.0 * p.standard_error);
        let half = bias_bound(0.1, &spec, 2.0);
        assert_abs_diff_eq!(2.0 * half, bias_bound(0.2, &spec, 2.0), epsilon = 1e-15);
    }

    #[test]
    fn noise_partial_sums_stay_bounded() {
        let obj = make_quadratic_with(&QuadraticSpec {
            n_agents: 3,
            dim: 3,
            condition: 2.0,
            center_spread: 0.5,
            s_variance: 1e-4,
            noise_variance: 0.01,
            seed: 2,
        })
        .unwrap();
        let w = metropolis_weights(&erdos_renyi(3, 0.8, 1).unwrap()).unwrap();
        let cfg = AlgoConfig::onepoint(
            Schedule::new(0.5, 0.75, 1.0, 0.25).unwrap(),
            PerturbationSpec::new(3, 1.0).unwrap(),
            4,
            20_000,
        );
        let probe = noise_partial_sums(&obj, &w, &cfg, &[100, 1000, 10_000]).unwrap();
        assert_eq!(probe.partial_sums.len(), 20_001);
        assert!(probe.partial_sums.iter().all(|p| p.1.is_finite()));
        let sups: Vec<f64> = probe.tail_sups.iter().map(|p| p.1).collect();
        assert!(sups[0] >= sups[1] && sups[1] >= sups[2], "{sups:?}");
    }
}
