//! Keyed random streams.
//!
//! Every random draw is taken from a stream identified by
//! `(seed, trial, step, position, codebook, purpose)`, so results never
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Step = 2,
    Corruption = 3,
    Diagnostic = 4,
}

/// Key of a stream. `step` is `u64::MAX` for draws outside the step loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub trial: u64,
    pub step: u64,
    pub position: u64,
    pub codebook: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self { seed, trial: 0, step: u64::MAX, position: 0, codebook: 0, purpose }
    }

    pub fn trial(self, trial: u64) -> Self {
        Self { trial, ..self }
    }

    pub fn step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    pub fn cell(self, position: usize, codebook: usize) -> Self {
        Self { position: position as u64, codebook: codebook as u64, ..self }
    }

    pub fn stream(&self) -> Stream {
        let mut state = splitmix64(self.seed ^ 0x6a09_e667_f3bc_c908);
        for word in [self.trial, self.step, self.position, self.codebook, self.purpose as u64] {
            state = splitmix64(state ^ splitmix64(word));
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
