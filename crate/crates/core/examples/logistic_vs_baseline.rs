//! Logistic regression on synthetic two-cluster data: 1P-DSGT against the
//! first-order DSGT baseline with noisy gradients.

use std::path::Path;

use zo_dsgt::harness::{load_json, Experiment, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["logistic_onepoint.json", "logistic_baseline.json"] {
        let cfg: RunConfig = load_json(&dir.join(name))?;
        let exp = Experiment::build(&cfg, &dir)?;
        let out = exp.execute()?;
        println!("{name}: {} of {} repetitions completed", out.completed, cfg.reps);
        for r in out.average.records.iter().filter(|r| r.k % 10_000 == 0) {
            println!(
                "  k {:>6}  loss {:.5}  accuracy {:.3}",
                r.k,
                r.loss,
                r.accuracy.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
