//! Seeded random streams. Every consumer draws from its own ChaCha stream
//! keyed by purpose, level and epoch, so the draws never depend on the order
//! in which work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    WeightInit { level: usize, attempt: usize },
    InitialLatents { level: usize },
    WeightSample { level: usize, epoch: usize },
}

impl Stream {
    fn id(self) -> u64 {
        let (tag, a, b) = match self {
            Stream::WeightInit { level, attempt } => (1u64, level, attempt),
            Stream::InitialLatents { level } => (2, level, 0),
            Stream::WeightSample { level, epoch } => (3, level, epoch),
        };
        (tag << 56) | ((a as u64 & 0xff_ffff) << 32) | (b as u64 & 0xffff_ffff)
    }
}

pub(crate) fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

pub(crate) fn gaussian_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
