//! Extends a cropped phantom with an untrained VAE and denoiser. The content
//! is noise; this shows the windowing, geometry and bookkeeping only. Use the
//! `scope` binary for trained models.

use scope_core::diffusion::{cosine_schedule, init_denoiser, DenoiserConfig, LatentDiffusion, LatentStats, SigmaMode};
use scope_core::phantom::{crop_to_fov, generate_subject, FovWindow, PhantomConfig};
use scope_core::preprocess::preprocess_volume;
use scope_core::repaint::{extend_fov, Direction, ExtensionPlan};
use scope_core::rng::keyed;
use scope_core::vae::{init_vae, VaeConfig};

fn main() -> scope_core::Result<()> {
    let cfg = PhantomConfig::default();
    let (vol, labels) = generate_subject(&cfg, 0)?;
    let (vol, _) = crop_to_fov(&vol, &labels, &FovWindow::new(0.0, 96.0)?)?;
    let vol = preprocess_volume(&vol, 1.0)?;
    let vae = init_vae(VaeConfig { slice_size: 32, latent_dim: 16, channels: [4, 8, 8], groups: 2, kl_weight: 1e-4 }, 0)?;
    let denoiser = init_denoiser(DenoiserConfig { n_s: 16, latent_dim: 16, channels: [4, 4, 8, 8], groups: 2, time_dim: 8 }, 0)?;
    let ldm = LatentDiffusion { denoiser, schedule: cosine_schedule(20)?, stats: LatentStats::identity(16), sigma_mode: SigmaMode::Posterior };
    for dir in [Direction::Inferior, Direction::Superior] {
        let ext = extend_fov(&vol, &ExtensionPlan::new(dir, 20, 16), &vae, &ldm, &mut keyed(0, 0, 0))?;
        let r = &ext.record;
        println!(
            "{dir:?}: {} -> {} slices, +{} mm, z_origin {} -> {}, {} windows, {} ms",
            vol.n_slices(),
            ext.volume.n_slices(),
            r.added_mm,
            r.z_origin_before,
            r.z_origin_after,
            r.windows.len(),
            r.elapsed_ms
        );
    }
    Ok(())
}
