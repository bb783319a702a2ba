use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zo_dsgt::harness::{
    cmd_certify, cmd_gen_data, cmd_run, cmd_sweep, load_json, HarnessError, Overrides, RunConfig, SweepConfig,
    SyntheticSpec,
};

#[derive(Parser)]
#[command(
    name = "zo-dsgt",
    version,
    about = "Zero-order distributed gradient tracking experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions (overrides the config).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            reps: self.reps,
            out: self.out.clone(),
        }
    }

    fn base_dir(&self) -> &Path {
        self.config.parent().unwrap_or(Path::new("."))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run repetitions and write the averaged trace and a summary.
    Run(Common),
    /// Write a synthetic two-class dataset CSV.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate the rate certificate on a one-point config.
    Certify(Common),
    /// Fit slopes over a grid of step-size exponents.
    Sweep(Common),
}

fn load_run(c: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg: RunConfig = load_json(&c.config)?;
    cfg.apply(&c.overrides());
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_run(&c)?;
            let s = cmd_run(&cfg, c.base_dir())?;
            if !c.quiet {
                let last = s.final_record.as_ref();
                eprintln!(
                    "{} reps, final loss {:?}, consensus {:?}, divergence slope {:?} -> {}",
                    s.completed_reps,
                    last.map(|r| r.loss),
                    last.map(|r| r.consensus),
                    s.slopes.divergence,
                    cfg.output_dir().display()
                );
            }
        }
        Command::GenData {
            n_samples,
            dim,
            separation,
            seed,
            out,
            quiet,
        } => {
            let spec = SyntheticSpec {
                n_samples,
                dim,
                separation,
                seed,
            };
            let data = cmd_gen_data(&spec, &out)?;
            if !quiet {
                eprintln!("wrote {} rows to {}", data.len(), out.display());
            }
        }
        Command::Certify(c) => {
            let cfg = load_run(&c)?;
            let f = cmd_certify(&cfg, c.base_dir())?;
            if !c.quiet {
                eprintln!(
                    "verdict: {}, rate condition {}, sigma1 within closed form {}, sigma5 within closed form {}",
                    f.report.verdict,
                    f.report.rate_condition,
                    f.report.sigma1_within_closed_form,
                    f.report.sigma5_within_closed_form
                );
            }
        }
        Command::Sweep(c) => {
            let mut cfg: SweepConfig = load_json(&c.config)?;
            cfg.base.apply(&c.overrides());
            let rows = cmd_sweep(&cfg, c.base_dir())?;
            if !c.quiet {
                for r in rows.iter().filter(|r| r.metric == "warning") {
                    eprintln!("warning: ({}, {}) {}", r.upsilon1, r.upsilon2, r.status);
                }
                eprintln!("{} rows -> {}", rows.len(), cfg.base.output_dir().display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
