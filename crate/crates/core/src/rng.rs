//! Counter-based seed splitting.
//!
//! Every random draw in a run is keyed by `(seed, stage, frame, step)`, so any
//! stage can be replayed on its own and reordering work never changes values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scheduler::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Background = 1,
    Harmonize = 2,
    Enhance = 3,
    Reparameterize = 4,
    Fixture = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, frame: u64, step: u64) -> u64 {
    [stream as u64, frame, step]
        .into_iter()
        .fold(splitmix64(seed), |acc, k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_for(seed: u64, stream: Stream, frame: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, frame, step))
}

/// Standard-normal tensor whose frame `f` is drawn from its own
/// `(seed, stream, f, step)` generator.
pub fn normal_tensor(shape: [usize; 4], seed: u64, stream: Stream, step: u64) -> LatentTensor {
    let per_frame = shape[1] * shape[2] * shape[3];
    let mut data = Vec::with_capacity(shape[0] * per_frame);
    for f in 0..shape[0] {
        let mut rng = rng_for(seed, stream, f as u64, step);
        data.extend((0..per_frame).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    LatentTensor::new(shape, data).expect("finite normals")
}
