//! Keyed random streams.
//!
//! Every consumer derives its generator from `(seed, key, field)` instead of
//! sharing one sequential stream, so results do not depend on the order in
//! which independent pieces of work run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Scalar, Tensor};

pub type StreamRng = ChaCha8Rng;

/// Field tags for the pipeline's independent streams.
pub mod field {
    pub const PHANTOM_SHAPE: u64 = 1;
    pub const PHANTOM_INTENSITY: u64 = 2;
    pub const VAE_INIT: u64 = 10;
    pub const VAE_STEP: u64 = 11;
    pub const LDM_INIT: u64 = 20;
    pub const LDM_STEP: u64 = 21;
    pub const EXTEND: u64 = 30;
    pub const EVAL: u64 = 31;
}

/// Generator keyed by `(seed, key, field)`; the triple is the ChaCha key.
pub fn keyed(seed: u64, key: u64, field: u64) -> StreamRng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&key.to_le_bytes());
    bytes[16..24].copy_from_slice(&field.to_le_bytes());
    bytes[24..].copy_from_slice(b"scope.v1");
    ChaCha8Rng::from_seed(bytes)
}

pub fn standard_normal<F: Scalar>(rng: &mut impl Rng) -> F {
    let z: f64 = rng.sample(StandardNormal);
    F::of(z)
}

pub fn normal_tensor<F: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| standard_normal(rng))
}
