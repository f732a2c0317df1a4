//! Counter-based random streams.
//!
//! Every Monte Carlo path draws from its own ChaCha8 stream keyed by
//! `(seed, stream index)`. A path's normals depend only on that key, so
//! serial, parallel and resumed runs produce the same bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub seed: u64,
    pub index: u64,
}

impl StreamId {
    pub fn new(seed: u64, index: u64) -> Self {
        Self { seed, index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        rng
    }

    /// Fills `out` with standard normal draws from this stream.
    pub fn fill_normals(&self, out: &mut [f64]) {
        let mut rng = self.rng();
        for z in out.iter_mut() {
            *z = StandardNormal.sample(&mut rng);
        }
    }
}
