//! Step-size thresholds, the β_k sequence and the rate certificate for a
//! small quadratic run, printed as JSON.

use zo_dsgt::analysis::{beta_sequence, rate_certificate, record_run, theory_constants, ProblemConstants, RunTrace};
use zo_dsgt::engine::AlgoConfig;
use zo_dsgt::estimator::{PerturbationSpec, Schedule};
use zo_dsgt::objective::{make_quadratic_with, QuadraticSpec};
use zo_dsgt::streams::repetition_seed;
use zo_dsgt::topology::{erdos_renyi, metropolis_weights};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let obj = make_quadratic_with(&QuadraticSpec {
        n_agents: 6,
        dim: 3,
        condition: 2.0,
        center_spread: 0.2,
        s_variance: 1e-4,
        noise_variance: 0.01,
        seed: 2,
    })?;
    let w = metropolis_weights(&erdos_renyi(6, 0.5, 4)?)?;
    let spec = PerturbationSpec::new(3, 1.0)?;
    let schedule = Schedule::new(1.0, 0.75, 1.6, 0.25)?;

    let seq = beta_sequence(w.rho_w(), &schedule, 5);
    println!("rho_w {:.4}, beta_0..5 = {:?}", w.rho_w(), seq.beta);

    let iters = 20_000;
    let mut traces = Vec::new();
    let mut stats = Vec::new();
    for r in 0..6 {
        let run = record_run(
            &obj,
            &w,
            &AlgoConfig::onepoint(schedule, spec, repetition_seed(3, r), iters),
            20,
            None,
        )?;
        if run.error.is_none() {
            traces.push(run.trace);
            stats.push(run.stats);
        }
    }
    let problem = ProblemConstants::from_objective(&obj, &w)?;
    let tc = theory_constants(problem, &spec, &schedule, &stats, iters)?;
    let report = rate_certificate(&tc, &schedule, &RunTrace::average(&traces)?);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
