//! Repeated 1P-DSGT runs on a strongly convex quadratic: averaged divergence,
//! consensus and regret with their fitted log-log slopes.
//!
//! cargo run --release --example quadratic_rate -- 50000 8

use zo_dsgt::analysis::{loglog_slope, record_run, Field, RunTrace};
use zo_dsgt::engine::AlgoConfig;
use zo_dsgt::estimator::{PerturbationSpec, Schedule};
use zo_dsgt::objective::{make_quadratic_with, QuadraticSpec};
use zo_dsgt::streams::repetition_seed;
use zo_dsgt::topology::{erdos_renyi, metropolis_weights};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iters: u64 = args.first().map_or(Ok(50_000), |s| s.parse())?;
    let reps: usize = args.get(1).map_or(Ok(8), |s| s.parse())?;

    let obj = make_quadratic_with(&QuadraticSpec {
        n_agents: 10,
        dim: 4,
        condition: 1.0,
        center_spread: 0.1,
        s_variance: 1e-4,
        noise_variance: 0.01,
        seed: 1,
    })?;
    let w = metropolis_weights(&erdos_renyi(10, 0.5, 11)?)?;
    let spec = PerturbationSpec::new(4, 1.0)?;
    // A = λα₂ = 0.25, so α₀γ₀ = 2 meets α₀γ₀ ≥ 0.5/A.
    let schedule = Schedule::new(1.0, 0.75, 2.0, 0.25)?;

    let mut traces = Vec::new();
    for r in 0..reps {
        let cfg = AlgoConfig::onepoint(schedule, spec, repetition_seed(1, r), iters);
        let run = record_run(&obj, &w, &cfg, 50, None)?;
        if let Some(e) = run.error {
            println!("repetition {r}: {e}");
            continue;
        }
        traces.push(run.trace);
    }
    let avg = RunTrace::average(&traces)?;
    for k in [0, 100, 1000, iters / 10, iters] {
        if let Some(r) = avg.at(k) {
            println!(
                "k {k:>7}: D {:.3e}  consensus {:.3e}  regret {:.3e}",
                r.divergence, r.consensus, r.cum_regret
            );
        }
    }
    let (lo, hi) = (iters / 10, iters);
    for f in [Field::Divergence, Field::Consensus, Field::CumRegret] {
        println!("{f} slope on [{lo}, {hi}]: {:.3}", loglog_slope(&avg, f, lo, hi)?);
    }
    Ok(())
}
