//! Builds a connected Erdős–Rényi network, its Metropolis weights, and shows
//! the consensus contraction `‖Wω − 1ω̄‖ ≤ ρ_w‖ω − 1ω̄‖` on a random stack.
//!
//! cargo run --example mixing_matrix -- 21 0.3 1

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zo_dsgt::topology::{distance_to_mean, erdos_renyi_with_budget, metropolis_weights, DEFAULT_RETRY_BUDGET};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(Ok(21), |s| s.parse())?;
    let p: f64 = args.get(1).map_or(Ok(0.3), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(1), |s| s.parse())?;

    let sample = erdos_renyi_with_budget(n, p, seed, DEFAULT_RETRY_BUDGET)?;
    let w = metropolis_weights(&sample.topology)?;
    println!(
        "G({n}, {p}) seed {seed}: {} edges after {} retries, rho_w = {:.6}",
        sample.topology.edge_count(),
        sample.retries,
        w.rho_w()
    );
    println!("doubly stochastic to {:.1e}", w.stochastic_deviation());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    println!("{:>5} {:>14} {:>14}", "round", "spread", "rho_w^k bound");
    let start = distance_to_mean(&omega);
    for k in 0..=10 {
        println!(
            "{k:>5} {:>14.6e} {:>14.6e}",
            distance_to_mean(&omega),
            start * w.rho_w().powi(k)
        );
        omega = w.weights() * omega;
    }
    Ok(())
}
