//! Experiment configuration, execution and persistence behind the CLI.
//!
//! A run is described by one JSON document ([`RunConfig`]). Everything is
//! validated while the [`Experiment`] is built, before any iteration runs.
//! Repetitions fan out over rayon and are aggregated in repetition order, so
//! outputs depend only on the config and its seed.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    loglog_slope, rate_certificate, record_run, theory_constants, thresholds, AnalysisError, CertificateReport, Field,
    IterationRecord, ProblemConstants, RunStats, RunTrace,
};
use crate::engine::{AlgoConfig, Algorithm, EngineError};
use crate::estimator::{PerturbationSpec, Schedule};
use crate::objective::{
    make_logistic, make_quadratic_with, Dataset, NoiseSpec, Objective, ObjectiveError, QuadraticSpec,
};
use crate::streams::repetition_seed;
use crate::topology::{erdos_renyi, metropolis_weights, MixingMatrix, Topology};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("repetition {rep} diverged: {error}")]
    Diverged { rep: usize, error: EngineError },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Diverged { .. } => 3,
            _ => 1,
        }
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{field}: {msg}"))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn default_stride() -> u64 {
    100
}
fn default_reps() -> usize {
    20
}
fn default_one() -> f64 {
    1.0
}
fn default_c_reg() -> f64 {
    0.1
}
fn default_sigma_u() -> f64 {
    0.01
}
fn default_x0_box() -> f64 {
    0.5
}

/// Synthetic two-cluster data, see [`Dataset::synthetic_two_class`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Dataset CSV; relative paths resolve against the config file.
    Csv {
        path: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub dim: usize,
    pub condition: f64,
    #[serde(default = "default_one")]
    pub center_spread: f64,
    #[serde(default = "default_s_variance")]
    pub s_variance: f64,
    #[serde(default)]
    pub noise_variance: f64,
    pub seed: u64,
}

fn default_s_variance() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticConfig {
    pub data: DataSource,
    /// The last `holdout` rows become the test set used for accuracy.
    #[serde(default)]
    pub holdout: usize,
    #[serde(default = "default_c_reg")]
    pub c_reg: f64,
    #[serde(default = "default_sigma_u")]
    pub sigma_u: f64,
    #[serde(default = "default_one")]
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveConfig {
    Quadratic(QuadraticConfig),
    Logistic(LogisticConfig),
}

/// Erdős–Rényi graph `G(n, p)` resampled until connected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub n: usize,
    pub p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub algorithm: Algorithm,
    pub alpha0: f64,
    pub upsilon1: f64,
    pub gamma0: f64,
    pub upsilon2: f64,
    /// Perturbation scale of the one-point estimate.
    #[serde(default = "default_one")]
    pub perturbation_scale: f64,
    /// Gradient-noise standard deviation of the first-order baseline.
    #[serde(default = "default_one")]
    pub grad_noise_std: f64,
    pub seed: u64,
    pub max_iters: u64,
    #[serde(default = "default_x0_box")]
    pub x0_box: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub objective: ObjectiveConfig,
    pub topology: TopologyConfig,
    pub algorithm: AlgorithmConfig,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.algorithm.seed = s;
        }
        if let Some(r) = o.reps {
            self.reps = r;
        }
        if let Some(out) = &o.out {
            self.output = Some(out.clone());
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Reads a JSON document, mapping parse failures to config errors.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| config_err(&path.display().to_string(), e))
}

/// A validated, ready-to-run experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub objective: Objective,
    pub test: Option<Dataset>,
    pub mixing: MixingMatrix,
    pub algo: AlgoConfig,
    pub stride: u64,
    pub reps: usize,
}

fn finite(field: &str, v: f64) -> Result<f64, HarnessError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(config_err(field, format!("must be finite, got {v}")))
    }
}

fn load_data(src: &DataSource, base_dir: &Path) -> Result<Dataset, HarnessError> {
    match src {
        DataSource::Csv { path } => {
            let p = base_dir.join(path);
            Dataset::read_csv(&p).map_err(|e| config_err("objective.data.path", format!("{}: {e}", p.display())))
        }
        DataSource::Synthetic(s) => {
            finite("objective.data.separation", s.separation)?;
            Dataset::synthetic_two_class(s.n_samples, s.dim, s.separation, s.seed)
                .map_err(|e| config_err("objective.data", e))
        }
    }
}

fn mixing_for(t: &TopologyConfig) -> Result<MixingMatrix, HarnessError> {
    if t.n == 0 {
        return Err(config_err("topology.n", "must be >= 1"));
    }
    if !(t.p > 0.0 && t.p <= 1.0) {
        return Err(config_err("topology.p", format!("must lie in (0, 1], got {}", t.p)));
    }
    let topo = if t.n == 1 {
        Topology::singleton()
    } else {
        erdos_renyi(t.n, t.p, t.seed).map_err(|e| config_err("topology", e))?
    };
    metropolis_weights(&topo).map_err(|e| config_err("topology", e))
}

impl Experiment {
    /// Validates `cfg` and builds its objective, network and algorithm.
    /// Relative data paths resolve against `base_dir`.
    pub fn build(cfg: &RunConfig, base_dir: &Path) -> Result<Self, HarnessError> {
        if cfg.reps == 0 {
            return Err(config_err("reps", "must be >= 1"));
        }
        if cfg.stride == 0 {
            return Err(config_err("stride", "must be >= 1"));
        }
        let a = &cfg.algorithm;
        if a.max_iters == 0 {
            return Err(config_err("algorithm.max_iters", "must be >= 1"));
        }
        let mixing = mixing_for(&cfg.topology)?;
        let n = cfg.topology.n;

        let (objective, test) = match &cfg.objective {
            ObjectiveConfig::Quadratic(q) => {
                let spec = QuadraticSpec {
                    n_agents: n,
                    dim: q.dim,
                    condition: finite("objective.condition", q.condition)?,
                    center_spread: finite("objective.center_spread", q.center_spread)?,
                    s_variance: finite("objective.s_variance", q.s_variance)?,
                    noise_variance: finite("objective.noise_variance", q.noise_variance)?,
                    seed: q.seed,
                };
                (
                    make_quadratic_with(&spec).map_err(|e| config_err("objective", e))?,
                    None,
                )
            }
            ObjectiveConfig::Logistic(l) => {
                let data = load_data(&l.data, base_dir)?;
                let (train, test) = if l.holdout > 0 {
                    let (tr, te) = data
                        .split_tail(l.holdout)
                        .map_err(|e| config_err("objective.holdout", e))?;
                    (tr, Some(te))
                } else {
                    (data, None)
                };
                if train.len() < n {
                    return Err(config_err(
                        "objective.data",
                        format!("{} training rows cannot be split across {n} agents", train.len()),
                    ));
                }
                let noise = NoiseSpec::new(l.noise_variance).map_err(|e| config_err("objective.noise_variance", e))?;
                let train = train.partitioned(n).map_err(|e| config_err("objective.data", e))?;
                let obj = make_logistic(train, l.c_reg, l.sigma_u, noise).map_err(|e| config_err("objective", e))?;
                (obj, test)
            }
        };

        let schedule_err = |e| config_err("algorithm", e);
        let algo = match a.algorithm {
            Algorithm::OnepointDsgt => {
                let schedule = Schedule::new(a.alpha0, a.upsilon1, a.gamma0, a.upsilon2).map_err(schedule_err)?;
                let spec = PerturbationSpec::new(objective.dim(), a.perturbation_scale)
                    .map_err(|e| config_err("algorithm.perturbation_scale", e))?;
                AlgoConfig::onepoint(schedule, spec, a.seed, a.max_iters)
            }
            Algorithm::DsgtNoisygrad => {
                let schedule = Schedule::relaxed(a.alpha0, a.upsilon1, a.gamma0, a.upsilon2).map_err(schedule_err)?;
                AlgoConfig::noisy_gradient(schedule, a.grad_noise_std, a.seed, a.max_iters)
            }
        };
        let algo = AlgoConfig {
            x0_box: a.x0_box,
            ..algo
        };
        algo.validate(&objective, &mixing)
            .map_err(|e| config_err("algorithm", e))?;
        Ok(Experiment {
            objective,
            test,
            mixing,
            algo,
            stride: cfg.stride,
            reps: cfg.reps,
        })
    }

    /// Runs every repetition. Repetition `r` uses seed
    /// `repetition_seed(seed, r)`; the network stays fixed.
    pub fn execute(&self) -> Result<Outcome, HarnessError> {
        let runs: Vec<_> = (0..self.reps)
            .into_par_iter()
            .map(|r| {
                let cfg = AlgoConfig {
                    seed: repetition_seed(self.algo.seed, r),
                    ..self.algo.clone()
                };
                record_run(&self.objective, &self.mixing, &cfg, self.stride, self.test.as_ref())
            })
            .collect::<Result<_, _>>()?;
        let mut traces = Vec::new();
        let mut stats = Vec::new();
        let mut diverged = Vec::new();
        let mut partial = None;
        for (rep, run) in runs.into_iter().enumerate() {
            match run.error {
                None => {
                    traces.push(run.trace);
                    stats.push(run.stats);
                }
                Some(error) => {
                    if partial.is_none() {
                        partial = Some(run.trace);
                    }
                    diverged.push((rep, error));
                }
            }
        }
        let average = if traces.is_empty() {
            partial.unwrap_or_default()
        } else {
            RunTrace::average(&traces)?
        };
        Ok(Outcome {
            average,
            stats,
            completed: traces.len(),
            diverged,
        })
    }

    /// Rate-fit window `[max(K₂, k_max/10), k_max]`.
    pub fn fit_window(&self) -> (u64, u64) {
        let k_max = self.algo.max_iters;
        let k2 = self.problem_constants().ok().and_then(|p| {
            let spec = self.algo.perturbation?;
            thresholds(p.lambda * spec.alpha2, &self.algo.schedule, p.rho_w)
                .ok()
                .map(|t| t.k2)
        });
        (k2.unwrap_or(0).max(k_max / 10), k_max)
    }

    /// Problem constants, with `α₁` estimated from sampled Hessian norms for
    /// logistic objectives.
    pub fn problem_constants(&self) -> Result<ProblemConstants, HarnessError> {
        let mut p = ProblemConstants::from_objective(&self.objective, &self.mixing)?;
        if self.objective.kind_name() == "logistic" {
            p.alpha1 = self.sampled_alpha1()?;
            p.alpha1_estimated = true;
        }
        Ok(p)
    }

    fn sampled_alpha1(&self) -> Result<f64, HarnessError> {
        let d = self.objective.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(self.algo.seed ^ 0x005e_eda1);
        let radius = self.algo.x0_box.max(1.0);
        let mut points: Vec<DVector<f64>> = (0..HESSIAN_SAMPLES)
            .map(|_| DVector::from_fn(d, |_, _| radius * (2.0 * rng.random::<f64>() - 1.0)))
            .collect();
        points.extend(self.objective.x_star());
        self.objective
            .sampled_hessian_bound(&points)
            .map_err(|e: ObjectiveError| HarnessError::Io(e.to_string()))
    }

    /// Certificate against an averaged trace, or `None` for the first-order
    /// baseline.
    pub fn certificate(&self, outcome: &Outcome) -> Result<Option<CertificateReport>, HarnessError> {
        let Some(spec) = self.algo.perturbation else {
            return Ok(None);
        };
        if outcome.stats.is_empty() {
            return Ok(None);
        }
        let problem = self.problem_constants()?;
        let tc = theory_constants(problem, &spec, &self.algo.schedule, &outcome.stats, self.algo.max_iters)?;
        Ok(Some(rate_certificate(&tc, &self.algo.schedule, &outcome.average)))
    }
}

/// Random points at which logistic Hessian norms are sampled.
pub const HESSIAN_SAMPLES: usize = 64;

#[derive(Debug)]
pub struct Outcome {
    /// Average over the completed repetitions, or the partial trace of the
    /// first failed repetition when none completed.
    pub average: RunTrace,
    pub stats: Vec<RunStats>,
    pub completed: usize,
    pub diverged: Vec<(usize, EngineError)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub divergence: Option<f64>,
    pub cum_regret: Option<f64>,
    pub consensus: Option<f64>,
}

impl Slopes {
    pub fn fit(trace: &RunTrace, (lo, hi): (u64, u64)) -> Self {
        let s = |f| loglog_slope(trace, f, lo, hi).ok();
        Slopes {
            divergence: s(Field::Divergence),
            cum_regret: s(Field::CumRegret),
            consensus: s(Field::Consensus),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceNote {
    pub rep: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub reps: usize,
    pub completed_reps: usize,
    pub diverged: Vec<DivergenceNote>,
    pub rho_w: f64,
    pub final_record: Option<IterationRecord>,
    pub fit_window: (u64, u64),
    pub slopes: Slopes,
    pub certificate_verdict: Option<String>,
    pub rate_condition: Option<bool>,
    pub trace_file: String,
}

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn header(with_accuracy: bool) -> Vec<&'static str> {
    let mut h = vec!["k", "loss", "divergence", "consensus", "cum_regret"];
    if with_accuracy {
        h.push("accuracy");
    }
    h
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a trace with 17 significant digits per float.
pub fn write_trace<W: std::io::Write>(trace: &RunTrace, out: W) -> Result<(), HarnessError> {
    let acc = trace.has_accuracy();
    let mut w = csv::Writer::from_writer(out);
    let e = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(header(acc)).map_err(e)?;
    for r in &trace.records {
        let mut row = vec![
            r.k.to_string(),
            float(r.loss),
            float(r.divergence),
            float(r.consensus),
            float(r.cum_regret),
        ];
        if acc {
            row.push(r.accuracy.map_or_else(String::new, float));
        }
        w.write_record(&row).map_err(e)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn read_trace<R: std::io::Read>(input: R) -> Result<RunTrace, HarnessError> {
    let mut rd = csv::Reader::from_reader(input);
    let bad = |msg: String| HarnessError::Io(format!("trace: {msg}"));
    let hdr: Vec<String> = rd
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let acc = match hdr.len() {
        5 => false,
        6 => true,
        _ => return Err(bad(format!("unexpected header {hdr:?}"))),
    };
    if hdr.iter().map(String::as_str).ne(header(acc)) {
        return Err(bad(format!("unexpected header {hdr:?}")));
    }
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let f =
            |i: usize| -> Result<f64, HarnessError> { row[i].parse().map_err(|e| bad(format!("{}: {e}", &row[i]))) };
        records.push(IterationRecord {
            k: row[0].parse().map_err(|e| bad(format!("{}: {e}", &row[0])))?,
            loss: f(1)?,
            divergence: f(2)?,
            consensus: f(3)?,
            cum_regret: f(4)?,
            accuracy: if acc && !row[5].is_empty() { Some(f(5)?) } else { None },
        });
    }
    Ok(RunTrace { records })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn prepare_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn first_divergence(outcome: &mut Outcome) -> Option<HarnessError> {
    if outcome.diverged.is_empty() {
        return None;
    }
    let (rep, error) = outcome.diverged.remove(0);
    Some(HarnessError::Diverged { rep, error })
}

/// Executes `cfg` and writes `trace.csv` and `summary.json` into its output
/// directory. On divergence the outputs are still written and the error is
/// returned afterwards.
pub fn cmd_run(cfg: &RunConfig, base_dir: &Path) -> Result<RunSummary, HarnessError> {
    let exp = Experiment::build(cfg, base_dir)?;
    let dir = cfg.output_dir();
    prepare_dir(&dir)?;
    let mut outcome = exp.execute()?;
    let window = exp.fit_window();
    let cert = exp.certificate(&outcome)?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        seed: cfg.algorithm.seed,
        reps: cfg.reps,
        completed_reps: outcome.completed,
        diverged: outcome
            .diverged
            .iter()
            .map(|(rep, e)| DivergenceNote {
                rep: *rep,
                message: e.to_string(),
            })
            .collect(),
        rho_w: exp.mixing.rho_w(),
        final_record: outcome.average.last().cloned(),
        fit_window: window,
        slopes: Slopes::fit(&outcome.average, window),
        certificate_verdict: cert.as_ref().map(|c| c.verdict.clone()),
        rate_condition: cert.as_ref().map(|c| c.rate_condition),
        trace_file: TRACE_FILE.into(),
    };
    let mut buf = Vec::new();
    write_trace(&outcome.average, &mut buf)?;
    write_file(&dir.join(TRACE_FILE), &buf)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    match first_divergence(&mut outcome) {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Writes a synthetic dataset CSV to `out`.
pub fn cmd_gen_data(spec: &SyntheticSpec, out: &Path) -> Result<Dataset, HarnessError> {
    let data = Dataset::synthetic_two_class(spec.n_samples, spec.dim, spec.separation, spec.seed)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    data.write_csv(out).map_err(|e| io_err(out, e))?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub config_hash: String,
    pub completed_reps: usize,
    pub report: CertificateReport,
}

/// Runs the repetitions as a pilot for `M̄`, `G` and `R`, then evaluates the
/// certificate against the averaged trace and writes `certificate.json`.
pub fn cmd_certify(cfg: &RunConfig, base_dir: &Path) -> Result<CertificateFile, HarnessError> {
    let exp = Experiment::build(cfg, base_dir)?;
    if exp.algo.algorithm != Algorithm::OnepointDsgt {
        return Err(config_err("algorithm.algorithm", "certify needs onepoint_dsgt"));
    }
    let dir = cfg.output_dir();
    prepare_dir(&dir)?;
    let mut outcome = exp.execute()?;
    if let Some(e) = first_divergence(&mut outcome).filter(|_| outcome.completed == 0) {
        return Err(e);
    }
    let report = exp
        .certificate(&outcome)?
        .ok_or_else(|| config_err("algorithm", "no completed repetition to certify"))?;
    let file = CertificateFile {
        config_hash: cfg.hash(),
        completed_reps: outcome.completed,
        report,
    };
    write_json(&dir.join(CERTIFICATE_FILE), &file)?;
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub upsilon1: f64,
    pub upsilon2: f64,
}

/// A base run whose exponents are replaced by each grid point in turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub grid: Vec<GridPoint>,
}

/// One long-format row; `slope` is empty on warning rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub upsilon1: f64,
    pub upsilon2: f64,
    pub metric: String,
    pub slope: Option<f64>,
    pub status: String,
}

/// Runs every grid point and writes `sweep.csv`. Points outside the
/// convergence regime produce a warning row; an all-skipped grid is a
/// config error.
pub fn cmd_sweep(cfg: &SweepConfig, base_dir: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    if cfg.grid.is_empty() {
        return Err(config_err("grid", "must be nonempty"));
    }
    let mut rows = Vec::new();
    let mut ran = 0;
    for p in &cfg.grid {
        let mut run = cfg.base.clone();
        run.algorithm.upsilon1 = p.upsilon1;
        run.algorithm.upsilon2 = p.upsilon2;
        let exp = match Experiment::build(&run, base_dir) {
            Ok(e) => e,
            Err(HarnessError::Config(msg)) => {
                rows.push(SweepRow {
                    upsilon1: p.upsilon1,
                    upsilon2: p.upsilon2,
                    metric: "warning".into(),
                    slope: None,
                    status: format!("skipped: {msg}"),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        ran += 1;
        let outcome = exp.execute()?;
        let slopes = Slopes::fit(&outcome.average, exp.fit_window());
        let status = match outcome.diverged.first() {
            None => "ok".to_string(),
            Some((rep, _)) => format!("repetition {rep} diverged"),
        };
        for (metric, slope) in [
            ("divergence", slopes.divergence),
            ("cum_regret", slopes.cum_regret),
            ("consensus", slopes.consensus),
        ] {
            rows.push(SweepRow {
                upsilon1: p.upsilon1,
                upsilon2: p.upsilon2,
                metric: metric.into(),
                slope,
                status: status.clone(),
            });
        }
    }
    if ran == 0 {
        return Err(config_err("grid", "every grid point was skipped"));
    }
    let dir = cfg.base.output_dir();
    prepare_dir(&dir)?;
    let path = dir.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(["upsilon1", "upsilon2", "metric", "slope", "status"])
        .map_err(|e| io_err(&path, e))?;
    for r in &rows {
        let slope = r.slope.map_or_else(String::new, float);
        w.write_record([
            float(r.upsilon1),
            float(r.upsilon2),
            r.metric.clone(),
            slope,
            r.status.clone(),
        ])
        .map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    write_json(
        &dir.join(SUMMARY_FILE),
        &serde_json::json!({ "config_hash": cfg.base.hash(), "rows": rows.len() }),
    )?;
    Ok(rows)
}
