//! Trains a small slice VAE on a few preprocessed phantoms and reports
//! reconstruction L1 as it goes.
//!
//! cargo run --release --example train_vae -- [steps]

use scope_core::diffcore::AdamConfig;
use scope_core::phantom::{generate_subject, PhantomConfig};
use scope_core::preprocess::preprocess_volume;
use scope_core::vae::{init_vae, train_vae, SliceDataset, VaeConfig, VaeTrainConfig};

fn main() -> scope_core::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = PhantomConfig::default();
    let vols = (0..4).map(|i| preprocess_volume(&generate_subject(&cfg, i)?.0, 1.0)).collect::<scope_core::Result<Vec<_>>>()?;
    let data = SliceDataset::new(vols)?;
    let mut vae = init_vae(VaeConfig { slice_size: 32, latent_dim: 16, channels: [8, 16, 16], groups: 4, kl_weight: 1e-4 }, 0)?;
    println!("{} slices, {} parameters", data.n_slices(), vae.num_params());
    let train = VaeTrainConfig { steps, batch: 8, adam: AdamConfig { lr: 1e-3, ..Default::default() } };
    train_vae(&mut vae, &data, &train, 0, |_, r| {
        if r.step % 50 == 0 || r.step + 1 == steps {
            println!("step {:4}: l1 {:.4} kl {:.2}", r.step, r.recon_l1, r.kl);
        }
        Ok(())
    })?;
    Ok(())
}
