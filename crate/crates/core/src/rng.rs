//! Seeded random streams.
//!
//! Every sample or run draws from its own ChaCha20 stream keyed by
//! `(seed, purpose, index)`, so results do not depend on how work is split
//! across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, Mat, Vector};
use crate::model::ValidatedModel;

/// Purpose tags keep streams for different consumers disjoint under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Trajectory = 1,
    FreeEnergy = 2,
    Rollout = 3,
    Critic = 4,
    Procedure = 5,
    Instances = 6,
    Entropy = 7,
}

pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

pub fn standard_normal<R: Rng>(rng: &mut R, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Lower Cholesky factors of `Λ_t` and `Ξ_t` for sampling.
#[derive(Debug, Clone)]
pub struct NoiseFactors {
    pub system: Vec<Mat>,
    pub exploration: Vec<Mat>,
}

impl NoiseFactors {
    pub fn new(model: &ValidatedModel) -> Self {
        let factor = |m: &Mat| {
            linalg::cholesky(m)
                .map(|c| c.l())
                .unwrap_or_else(|| linalg::psd_sqrt(m))
        };
        NoiseFactors {
            system: model.system_noise.iter().map(factor).collect(),
            exploration: model.exploration.iter().map(factor).collect(),
        }
    }

    /// Draw `(w_t, v_t)` with zero mean.
    pub fn draw<R: Rng>(&self, rng: &mut R, t: usize) -> (Vector, Vector) {
        let w = &self.system[t] * standard_normal(rng, self.system[t].nrows());
        let v = &self.exploration[t] * standard_normal(rng, self.exploration[t].nrows());
        (w, v)
    }
}
