//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 (`rand_chacha`), whose output is
//! fixed by its published algorithm, so a seed reproduces the same numbers
//! on every platform. Independent consumers of one seed (data generation,
//! parameter init, batch shuffling, ...) use separate ChaCha streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Adapter = 3,
    Shuffle = 4,
    Fixture = 5,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Standard normal draws from a seeded stream.
#[derive(Debug, Clone)]
pub struct Normal {
    rng: ChaCha8Rng,
}

impl Normal {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn sample(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }
}
