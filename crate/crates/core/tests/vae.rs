mod common;

use scope_core::diffcore::AdamConfig;
use scope_core::grid::Grid;
use scope_core::preprocess::NormalizedVolume;
use scope_core::rng::keyed;
use scope_core::vae::{init_vae, kl_to_standard_normal, reparameterize, train_vae, LatentSlice, SliceDataset, VaeTrainConfig};
use scope_core::volume_io::Checkpoint;

use common::*;

#[test]
fn tiny_variance_collapses_to_mean() {
    let lat = LatentSlice { mu: vec![0.3, -1.2, 4.0], logvar: vec![-80.0; 3] };
    let z = reparameterize(&lat, &mut keyed(1, 0, 0));
    for (a, b) in z.iter().zip(&lat.mu) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn reparameterized_draws_have_requested_moments() {
    let lat = LatentSlice { mu: vec![0.5, -2.0], logvar: vec![0.0, (0.25f32).ln()] };
    let n = 100_000;
    let mut rng = keyed(2, 0, 0);
    let draws: Vec<Vec<f32>> = (0..n).map(|_| reparameterize(&lat, &mut rng)).collect();
    for j in 0..2 {
        let mean = draws.iter().map(|d| d[j] as f64).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - lat.mu[j] as f64).abs() < 0.02, "mean {mean}");
        assert!((var - (lat.logvar[j] as f64).exp()).abs() < 0.02, "var {var}");
    }
    let lat = LatentSlice { mu: vec![0.0; 8], logvar: vec![0.0; 8] };
    assert_eq!(reparameterize(&lat, &mut keyed(3, 1, 1)), reparameterize(&lat, &mut keyed(3, 1, 1)));
}

/// ∫ p log(p/q) by the trapezoid rule, one dimension at a time.
fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
    let sd = (0.5 * logvar).exp();
    let (lo, hi, n) = (mu - 12.0 * sd, mu + 12.0 * sd, 20_000);
    let h = (hi - lo) / n as f64;
    let ln_p = |x: f64| -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let ln_q = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let f = |x: f64| ln_p(x).exp() * (ln_p(x) - ln_q(x));
    let mut s = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        s += f(lo + i as f64 * h);
    }
    s * h
}

#[test]
fn kl_matches_numerical_integration() {
    let mu = [0.0f32, 1.0, -0.7, 2.5];
    let logvar = [0.0f32, -1.0, 0.8, -2.0];
    let lat = LatentSlice { mu: mu.to_vec(), logvar: logvar.to_vec() };
    let oracle: f64 = mu.iter().zip(&logvar).map(|(&m, &l)| kl_quadrature(m as f64, l as f64)).sum();
    assert!((kl_to_standard_normal(&lat) - oracle).abs() < 1e-6, "{} vs {oracle}", kl_to_standard_normal(&lat));
    assert_eq!(kl_to_standard_normal(&LatentSlice { mu: vec![0.0; 5], logvar: vec![0.0; 5] }), 0.0);
}

/// Decoder whose output is the constant `c` for any latent.
fn constant_decoder(c: f32) -> scope_core::vae::VaeModel<f32> {
    let mut m = tiny_vae(4);
    m.config.kl_weight = 0.0;
    for p in m.decoder_params.iter_mut() {
        if p.name.starts_with("dec.out") {
            let v = if p.name.ends_with("bias") { c.atanh() } else { 0.0 };
            p.value.data_mut().iter_mut().for_each(|w| *w = v);
        }
    }
    m
}

#[test]
fn constant_decoder_loss_fixtures() {
    let px = TINY_SIDE * TINY_SIDE;
    let m = constant_decoder(0.3);
    let (loss, recon) = m.vae_loss(&vec![0.3; px], &mut keyed(5, 0, 0)).unwrap();
    assert!(recon.iter().all(|&r| (r - 0.3).abs() < 1e-6));
    assert!(loss.abs() < 1e-6, "{loss}");
    let (loss, _) = m.vae_loss(&vec![0.4; px], &mut keyed(5, 0, 0)).unwrap();
    assert!((loss - 0.1).abs() < 1e-6, "{loss}");
}

fn one_slice_dataset() -> SliceDataset {
    let s = TINY_SIDE;
    let data = (0..s * s)
        .map(|i| {
            let (x, y) = ((i % s) as f32 / s as f32, (i / s) as f32 / s as f32);
            0.6 * (-((x - 0.5).powi(2) + (y - 0.4).powi(2)) * 12.0).exp() - 0.3
        })
        .collect();
    let vol = NormalizedVolume::new(Grid::new([s, s, 1], [4.0, 4.0, 3.0], 0.0, data).unwrap()).unwrap();
    SliceDataset::new(vec![vol]).unwrap()
}

#[test]
fn vae_overfits_one_slice() {
    let data = one_slice_dataset();
    let mut m = tiny_vae(6);
    let cfg = VaeTrainConfig { steps: 500, batch: 1, adam: AdamConfig { lr: 3e-3, ..Default::default() } };
    let log = train_vae(&mut m, &data, &cfg, 6, |_, _| Ok(())).unwrap();
    let blocks: Vec<f64> = log.chunks(50).map(|c| c.iter().map(|r| r.recon_l1).sum::<f64>() / c.len() as f64).collect();
    assert!(blocks.windows(2).all(|w| w[1] <= w[0]), "{blocks:?}");
    let z = m.encode_means(&[data.slice(0)]).unwrap();
    let out = m.decode_slices(&z).unwrap();
    let l1 = out[0].iter().zip(data.slice(0)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / out[0].len() as f64;
    assert!(l1 < 0.05, "l1 {l1}");
}

#[test]
fn resumed_vae_training_is_bitwise_identical() {
    let mut rng = keyed(7, 0, 0);
    let data = SliceDataset::new(vec![random_volume(&mut rng, TINY_SIDE, 6)]).unwrap();
    let cfg = |steps| VaeTrainConfig { steps, batch: 3, adam: AdamConfig::default() };
    let mut full = tiny_vae(7);
    let full_log = train_vae(&mut full, &data, &cfg(10), 7, |_, _| Ok(())).unwrap();

    let mut half = tiny_vae(7);
    let mut log = train_vae(&mut half, &data, &cfg(5), 7, |_, _| Ok(())).unwrap();
    let bytes = half.to_checkpoint(true, "", 7).encode().unwrap();
    let mut resumed = init_vae(tiny_vae_config(), 1234).unwrap();
    resumed.load_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    log.extend(train_vae(&mut resumed, &data, &cfg(10), 7, |_, _| Ok(())).unwrap());
    assert_eq!(log, full_log);
    assert_eq!(resumed.to_checkpoint(true, "", 7), full.to_checkpoint(true, "", 7));
}

#[test]
fn mismatched_slice_size_is_rejected() {
    let mut rng = keyed(8, 0, 0);
    let data = SliceDataset::new(vec![random_volume(&mut rng, 32, 2)]).unwrap();
    let mut m = tiny_vae(8);
    let cfg = VaeTrainConfig { steps: 1, batch: 1, adam: AdamConfig::default() };
    assert!(train_vae(&mut m, &data, &cfg, 8, |_, _| Ok(())).is_err());
}
