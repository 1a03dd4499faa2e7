//! Seeded, platform-stable random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, key)` so results
//! do not depend on call order elsewhere in the program.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream named by a string key.
pub fn stream(seed: u64, key: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix(seed) ^ fnv1a(key.as_bytes()))
}

/// Counter-style stream keyed by `(seed, flow, step)`.
pub fn keyed(seed: u64, flow: u64, step: u64) -> StreamRng {
    let k = splitmix(splitmix(splitmix(seed) ^ flow) ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d));
    ChaCha8Rng::seed_from_u64(k)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Stable identifier for a name, used to key per-modality noise.
pub fn name_id(name: &str) -> u64 {
    fnv1a(name.as_bytes())
}
