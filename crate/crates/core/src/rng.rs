//! Named, pre-split random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Stream `name` of `seed`: ChaCha keyed by the seed, with the stream id
/// taken from an FNV-1a hash of the name.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Every source of randomness used by a search run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    /// Weight initialisation and the initial population.
    pub init: Rng,
    /// Shuffling and augmentation.
    pub data: Rng,
    /// Per-batch child sampling, dropout and drop-path masks.
    pub sample: Rng,
    /// Generation construction.
    pub ga: Rng,
    /// Validation subset draws.
    pub valid: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            init: stream(seed, "init"),
            data: stream(seed, "data"),
            sample: stream(seed, "sample"),
            ga: stream(seed, "ga"),
            valid: stream(seed, "valid"),
        }
    }
}
