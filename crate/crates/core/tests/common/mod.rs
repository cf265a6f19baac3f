#![allow(dead_code)]

use rand::Rng;
use scope_core::diffcore::Tensor;
use scope_core::diffusion::{cosine_schedule, init_denoiser, DenoiserConfig, LatentDiffusion, LatentStats, SigmaMode};
use scope_core::grid::Grid;
use scope_core::preprocess::NormalizedVolume;
use scope_core::rng::keyed;
use scope_core::vae::{init_vae, VaeConfig, VaeModel};

pub const TINY_SIDE: usize = 16;
pub const TINY_DIM: usize = 16;

pub fn tiny_vae_config() -> VaeConfig {
    VaeConfig { slice_size: TINY_SIDE, latent_dim: TINY_DIM, channels: [4, 8, 8], groups: 2, kl_weight: 1e-3 }
}

pub fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig { n_s: 16, latent_dim: TINY_DIM, channels: [4, 4, 8, 8], groups: 2, time_dim: 8 }
}

pub fn tiny_vae(seed: u64) -> VaeModel<f32> {
    init_vae(tiny_vae_config(), seed).unwrap()
}

/// Untrained denoiser with a randomized output layer, so samples actually
/// depend on the network.
pub fn tiny_ldm(seed: u64, steps: usize) -> LatentDiffusion {
    let mut denoiser = init_denoiser(tiny_denoiser_config(), seed).unwrap();
    let mut rng = keyed(seed, 99, 99);
    for name in ["conv_out.weight", "conv_out.bias"] {
        let id = denoiser.params.id(name).unwrap();
        for w in denoiser.params.get_mut(id).value.data_mut() {
            *w = rng.random_range(-0.05..0.05);
        }
    }
    LatentDiffusion { denoiser, schedule: cosine_schedule(steps).unwrap(), stats: LatentStats::identity(TINY_DIM), sigma_mode: SigmaMode::Posterior }
}

pub fn random_volume(rng: &mut impl Rng, side: usize, slices: usize) -> NormalizedVolume {
    let data = (0..side * side * slices).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    let z0 = rng.random_range(-50.0..50.0);
    NormalizedVolume::new(Grid::new([side, side, slices], [4.0, 4.0, 3.0], z0, data).unwrap()).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}
