//! Counter-based random streams.
//!
//! Every `(step, particle)` pair owns an independent ChaCha stream derived
//! from the run seed, so draws do not depend on the order in which particles
//! are processed or on the number of worker threads.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const PROPOSAL_DOMAIN: u64 = 0x7464_735f_7072_6f70;
const RESAMPLE_DOMAIN: u64 = 0x7464_735f_7265_7361;

#[derive(Debug, Clone)]
pub struct StreamFactory {
    proposal: ChaCha8Rng,
    resample: ChaCha8Rng,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        Self {
            proposal: ChaCha8Rng::seed_from_u64(seed ^ PROPOSAL_DOMAIN),
            resample: ChaCha8Rng::seed_from_u64(seed ^ RESAMPLE_DOMAIN),
        }
    }

    /// Stream for drawing particle `index` at diffusion level `step`.
    pub fn particle(&self, step: usize, index: usize) -> ChaCha8Rng {
        let mut rng = self.proposal.clone();
        rng.set_stream(((step as u64) << 32) | index as u64);
        rng
    }

    /// Stream for the resampling event that precedes level `step`.
    pub fn resampling(&self, step: usize) -> ChaCha8Rng {
        let mut rng = self.resample.clone();
        rng.set_stream(step as u64);
        rng
    }
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}
