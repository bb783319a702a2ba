//! Fitted slopes over a grid of step-size exponents, using the sweep config
//! shipped in `configs/`. Rows land in `out/sweep/sweep.csv`.

use std::path::Path;

use zo_dsgt::harness::{cmd_sweep, load_json, SweepConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut cfg: SweepConfig = load_json(&dir.join("exponent_sweep.json"))?;
    cfg.base.output = Some("out/sweep".into());
    for row in cmd_sweep(&cfg, &dir)? {
        match row.slope {
            Some(s) => println!("({}, {}) {:<10} {s:+.3}", row.upsilon1, row.upsilon2, row.metric),
            None => println!("({}, {}) {}", row.upsilon1, row.upsilon2, row.status),
        }
    }
    Ok(())
}
