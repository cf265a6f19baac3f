//! Slice-latent diffusion for extending the z field of view of CT volumes.
//!
//! Axial slices are compressed one at a time by a VAE; the per-slice latents
//! of `N_s` consecutive slices are stacked into a context matrix that a
//! denoising diffusion model learns. Missing slices at either end of a volume
//! are then imputed zero-shot by masked reverse diffusion, decoded, and
//! appended while acquired slices pass through untouched.
//!
//! Module map:
//!
//! - [`phantom`]: procedural anatomy volumes and the two partial-FOV datasets
//! - [`volume_io`]: header/raw volumes, checkpoints, PGM previews
//! - [`preprocess`]: HU clipping, normalization, anti-aliased downsampling
//! - [`diffcore`]: tensors, reverse-mode gradients, layers, Adam
//! - [`vae`]: slice VAE and its training loop
//! - [`diffusion`]: noise schedule, U-Net denoiser, loss, reverse step
//! - [`repaint`]: masked latent guidance and FOV extension
//! - [`metrics`]: SSIM, PSNR, volume disagreement, coverage profiles
//! - [`config`] / [`pipeline`]: run configuration and the command suite

pub mod config;
pub mod diffcore;
pub mod diffusion;
mod error;
pub mod grid;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod repaint;
pub mod rng;
pub mod vae;
pub mod volume_io;

pub use error::{Error, Result};
