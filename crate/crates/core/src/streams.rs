//! Seeded random streams.
//!
//! Every agent owns three independent ChaCha streams, one per role, derived
//! from a single run seed. Runs are therefore bit-reproducible from the seed
//! and the streams of different agents never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    Perturbation = 0,
    Process = 1,
    Noise = 2,
    Init = 3,
}

/// Deterministic stream for `(seed, agent, role)`.
pub fn stream(seed: u64, agent: usize, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((agent as u64) << 2) | role as u64);
    rng
}

/// The per-agent random sources consumed by one-point queries.
#[derive(Debug, Clone)]
pub struct AgentStreams {
    /// Draws the perturbation direction Φ.
    pub perturbation: ChaCha8Rng,
    /// Draws the stochastic process S.
    pub process: ChaCha8Rng,
    /// Draws the additive query noise ζ (or the gradient noise of the
    /// first-order baseline).
    pub noise: ChaCha8Rng,
}

impl AgentStreams {
    pub fn new(seed: u64, agent: usize) -> Self {
        AgentStreams {
            perturbation: stream(seed, agent, StreamRole::Perturbation),
            process: stream(seed, agent, StreamRole::Process),
            noise: stream(seed, agent, StreamRole::Noise),
        }
    }

    /// Streams for agents `0..n`.
    pub fn for_agents(seed: u64, n: usize) -> Vec<Self> {
        (0..n).map(|i| AgentStreams::new(seed, i)).collect()
    }
}

/// Seed for repetition `rep` of a run seeded with `base`.
pub fn repetition_seed(base: u64, rep: usize) -> u64 {
    // splitmix64 finalizer keeps nearby repetition seeds unrelated.
    let mut z = base.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
