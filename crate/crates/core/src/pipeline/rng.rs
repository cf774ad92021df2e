//! Named deterministic RNG streams derived from one global seed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for draw `counter` of `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: &str, counter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(stream)) ^ counter)
}

/// Randomness handed to a user function for one call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRng {
    seed: u64,
}

impl StepRng {
    pub fn from_seed(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator for `purpose`; equal purposes give equal sequences.
    pub fn rng(&self, purpose: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, purpose, 0))
    }
}

/// Counter-based streams (`train`, `predict`, `shuffle`, ...). Each draw
/// advances the stream's counter; counters are part of checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStreams {
    pub seed: u64,
    pub counters: BTreeMap<String, u64>,
}

impl RngStreams {
    pub const TRAIN: &'static str = "train";
    pub const PREDICT: &'static str = "predict";
    pub const SHUFFLE: &'static str = "shuffle";

    pub fn new(seed: u64) -> Self {
        let counters = [Self::TRAIN, Self::PREDICT, Self::SHUFFLE]
            .iter()
            .map(|s| (s.to_string(), 0))
            .collect();
        Self { seed, counters }
    }

    pub fn next(&mut self, stream: &str) -> StepRng {
        let c = self.counters.entry(stream.to_string()).or_insert(0);
        let rng = StepRng::from_seed(derive_seed(self.seed, stream, *c));
        *c += 1;
        rng
    }

    /// Draw `index` of `stream` without touching the counter.
    pub fn at(&self, stream: &str, index: u64) -> StepRng {
        StepRng::from_seed(derive_seed(self.seed, stream, index))
    }

    /// Permutation of `0..n` for `epoch`, a function of (seed, epoch) only.
    pub fn epoch_permutation(&self, n: usize, epoch: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.at(Self::SHUFFLE, epoch).rng("permutation"));
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_draws() {
        let (mut a, mut b) = (RngStreams::new(42), RngStreams::new(42));
        for _ in 0..3 {
            let x: u64 = a.next("train").rng("dropout").random();
            let y: u64 = b.next("train").rng("dropout").random();
            assert_eq!(x, y);
        }
        assert_eq!(a.epoch_permutation(20, 1), b.epoch_permutation(20, 1));
        assert_ne!(a.epoch_permutation(20, 1), a.epoch_permutation(20, 2));
        let z: u64 = RngStreams::new(43).next("train").rng("dropout").random();
        let w: u64 = RngStreams::new(42).next("train").rng("dropout").random();
        assert_ne!(z, w);
    }
}
