//! Seed derivation for every stochastic stream in a run.
//!
//! All randomness flows from three user seeds (model, data, rounds). Sub-streams are
//! derived by hashing a tag path into a fresh ChaCha8 key, so a stream never depends on
//! how many values another stream consumed or on which thread drew them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub rounds: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 42,
            data: 7,
            rounds: 1234,
        }
    }
}

impl Seeds {
    pub fn uniform(seed: u64) -> Self {
        Seeds {
            model: seed,
            data: seed,
            rounds: seed,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a path of tags into a single 64-bit seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Identifies which replay of the T-round horizon a round belongs to.
///
/// Meta-iterations each draw their own batches and participation; baseline runs and
/// the final evaluation pass of learned weights share one evaluation stream so that
/// methods are compared on common random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundStream {
    Meta(usize),
    Evaluation,
}

impl RoundStream {
    fn tag(self) -> u64 {
        match self {
            RoundStream::Meta(m) => m as u64,
            RoundStream::Evaluation => u64::MAX,
        }
    }

    pub fn client_rng(self, rounds_seed: u64, round: usize, client: usize) -> ChaCha8Rng {
        rng(rounds_seed, &[self.tag(), round as u64, client as u64])
    }
}
