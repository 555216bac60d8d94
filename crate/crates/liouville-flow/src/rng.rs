//! Seeded, counter-based randomness.
//!
//! Every stochastic code path in this crate draws from a ChaCha8 generator (a
//! block cipher in counter mode, so the stream is a pure function of seed and
//! position). The generator name and seed are recorded in the header of every
//! artifact a stochastic command writes, which is what makes reruns
//! byte-identical and test vectors portable across languages.
//!
//! Independent substreams for distinct purposes (data synthesis, parameter
//! initialization, batch selection, ...) come from ChaCha's 64-bit stream
//! field rather than from ad-hoc seed arithmetic, so adding a new consumer
//! never perturbs existing draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name recorded in output headers next to the seed.
pub const GENERATOR_NAME: &str = "chacha8";

/// Substream labels. The numeric values are part of the reproducibility
/// contract: changing them changes every artifact produced from a given seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Synthetic dataset draws.
    Dataset = 1,
    /// Network parameter initialization.
    Init = 2,
    /// Minibatch index selection during training.
    Batches = 3,
    /// Base-measure draws for sampling through the inverse flow.
    Sampling = 4,
    /// Probe points for empirical Lipschitz and related estimates.
    Probes = 5,
    /// Scratch stream for tests and the verify suite.
    Verify = 6,
}

/// Root generator for a seed (stream 0).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream of a seed.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Uniform draw from the open ball of radius 1/2 by rejection from the
/// enclosing cube. Acceptance is ~0.79 in d=1..2 and still workable at d=8.
pub fn uniform_in_ball(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        if sq_norm(&z) < 0.25 {
            return z;
        }
    }
}

/// Squared Euclidean norm.
pub fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    sq_norm(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = seeded(7);
        let mut b = seeded(7);
        for _ in 0..100 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn substreams_are_distinct_but_reproducible() {
        let mut a1 = substream(7, Stream::Dataset);
        let mut a2 = substream(7, Stream::Dataset);
        let mut b = substream(7, Stream::Init);
        let xs1: Vec<u64> = (0..8).map(|_| a1.gen()).collect();
        let xs2: Vec<u64> = (0..8).map(|_| a2.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn ball_draws_stay_inside() {
        let mut rng = seeded(3);
        for _ in 0..1000 {
            let z = uniform_in_ball(&mut rng, 2);
            assert!(norm(&z) < 0.5);
        }
    }
}
