//! Reproducible random streams.
//!
//! Every random draw in the lab comes from a ChaCha8 stream keyed by a
//! master seed plus a (purpose, point, trial) triple. ChaCha is a
//! counter-based generator: the key selects the 256-bit seed and the triple
//! selects one of 2^64 independent streams, so tasks can be scheduled in any
//! order on any number of workers and still see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type handed to every sampling routine.
pub type LabRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Model = 1,
    Dataset = 2,
    MonteCarlo = 3,
    Verify = 4,
    Candidates = 5,
}

/// Identifies a single random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master: u64,
    pub purpose: Purpose,
    pub point: u64,
    pub trial: u64,
}

impl StreamKey {
    pub fn new(master: u64, purpose: Purpose, point: u64, trial: u64) -> Self {
        Self {
            master,
            purpose,
            point,
            trial,
        }
    }

    /// Derive a child key for sub-streams (e.g. Monte-Carlo shards).
    pub fn child(&self, shard: u64) -> Self {
        Self {
            master: splitmix64(self.master ^ splitmix64(shard.wrapping_add(0x5bd1_e995))),
            ..*self
        }
    }

    pub fn rng(&self) -> LabRng {
        let mut seed = [0u8; 32];
        let mut state = self.master;
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        let stream = splitmix64(
            (self.purpose as u64)
                ^ splitmix64(self.point ^ splitmix64(self.trial.wrapping_mul(0x9e37_79b9_7f4a_7c15))),
        );
        rng.set_stream(stream);
        rng
    }
}

/// Convenience: a stream for `(master, purpose, point, trial)`.
pub fn stream(master: u64, purpose: Purpose, point: u64, trial: u64) -> LabRng {
    StreamKey::new(master, purpose, point, trial).rng()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
