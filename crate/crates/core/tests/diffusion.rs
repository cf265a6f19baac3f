mod common;

use proptest::prelude::*;
use rand::Rng;
use scope_core::diffcore::{AdamConfig, Tensor};
use scope_core::diffusion::{cosine_schedule, init_denoiser, ldm_loss, prepare_latents, q_sample, step_means, train_ldm, LdmTrainConfig, NoisePredictor};
use scope_core::rng::{keyed, normal_tensor, standard_normal};
use scope_core::{Error, Result};

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_schedule_is_well_formed(steps in 2usize..=4000) {
        let s = cosine_schedule(steps).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab.len(), steps + 1);
        prop_assert_eq!(ab[0], 1.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b <= 0.999));
        for t in 1..=steps {
            prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - s.beta(t))).abs() < 1e-15);
            prop_assert!(s.posterior_variance(t) <= s.beta(t) + 1e-15);
        }
    }
}

#[test]
fn clipping_engages_near_the_end() {
    let s = cosine_schedule(1000).unwrap();
    let max = s.betas().iter().copied().fold(0.0, f64::max);
    assert_eq!(max, 0.999);
    assert_eq!(s.beta(1000), 0.999);
    assert!(s.beta(500) < 0.999);
}

#[test]
fn q_sample_monte_carlo_marginal() {
    let s = cosine_schedule(100).unwrap();
    let t = 40;
    let ab = s.alpha_bar(t);
    let z0 = Tensor::new(&[1, 4], vec![1.5f32, -0.5, 0.0, 2.0]).unwrap();
    let n = 10_000;
    let mut rng = keyed(21, 0, 0);
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..n {
        let eps = normal_tensor::<f32>(&[1, 4], &mut rng);
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        for j in 0..4 {
            sum[j] += zt.data()[j] as f64;
            sq[j] += (zt.data()[j] as f64).powi(2);
        }
    }
    let sd = (1.0 - ab).sqrt();
    for j in 0..4 {
        let mean = sum[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        assert!((mean - ab.sqrt() * z0.data()[j] as f64).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "var {var}");
    }
}

#[test]
fn stepwise_noising_matches_closed_form() {
    // z_t = √α_t·z_{t−1} + √β_t·ε applied t times has the same marginal.
    let s = cosine_schedule(50).unwrap();
    let (t, z0, n) = (30, 1.2f64, 20_000);
    let mut rng = keyed(22, 0, 0);
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = z0;
        for k in 1..=t {
            z = s.alpha(k).sqrt() * z + s.beta(k).sqrt() * standard_normal::<f64>(&mut rng);
        }
        vals.push(z);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let ab = s.alpha_bar(t);
    assert!((mean - ab.sqrt() * z0).abs() < 3.0 * ((1.0 - ab) / n as f64).sqrt());
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
}

struct Offset {
    eps: Tensor<f32>,
    c: f32,
}

impl NoisePredictor for Offset {
    fn predict_noise(&self, _: &Tensor<f32>, _: usize) -> Result<Tensor<f32>> {
        Ok(self.eps.map(|e| e + self.c))
    }
}

#[test]
fn loss_of_exact_and_offset_predictors() {
    let s = cosine_schedule(20).unwrap();
    let mut rng = keyed(23, 0, 0);
    let z0 = normal_tensor::<f32>(&[16, 8], &mut rng);
    let eps = normal_tensor::<f32>(&[16, 8], &mut rng);
    let exact = ldm_loss(&Offset { eps: eps.clone(), c: 0.0 }, &z0, 7, &eps, &s).unwrap();
    assert_eq!(exact, 0.0);
    let off = ldm_loss(&Offset { eps: eps.clone(), c: 0.25 }, &z0, 7, &eps, &s).unwrap();
    // e + c is rounded in f32
    assert!((off - 0.0625).abs() < 1e-7, "{off}");
}

fn single_context(seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = keyed(seed, 0, 0);
    // Smooth rows: neighbouring slices share structure, like real latents.
    let base: Vec<f32> = (0..TINY_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = Tensor::from_fn(&[16, TINY_DIM], |i| {
        let (r, c) = (i / TINY_DIM, i % TINY_DIM);
        base[c] * (1.0 + 0.1 * r as f32).cos()
    });
    vec![m]
}

#[test]
fn denoiser_overfits_a_single_context() {
    let latents = single_context(24);
    let schedule = cosine_schedule(50).unwrap();
    let mut net = init_denoiser(tiny_denoiser_config(), 24).unwrap();
    let cfg = LdmTrainConfig { steps: 2000, batch: 4, adam: AdamConfig { lr: 2e-3, ..Default::default() } };
    let log = train_ldm(&mut net, &latents, &schedule, &cfg, 24, |_, _| Ok(())).unwrap();
    let means = step_means(&log);
    let avg = |r: std::ops::Range<usize>| means[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let (first, last) = (avg(0..50), avg(means.len() - 50..means.len()));
    assert!(last < 0.5 * first, "first {first} last {last}");
}

#[test]
fn training_leaves_vae_untouched_and_is_reproducible() {
    let vae = tiny_vae(25);
    let before = vae.to_checkpoint(true, "", 0).encode().unwrap();
    let mut rng = keyed(25, 0, 0);
    let vols: Vec<_> = (0..2).map(|_| random_volume(&mut rng, TINY_SIDE, 20)).collect();
    let (latents, _) = prepare_latents(&vae, &vols, TINY_DIM).unwrap();
    let schedule = cosine_schedule(20).unwrap();
    let cfg = LdmTrainConfig { steps: 6, batch: 2, adam: AdamConfig::default() };
    let run = || {
        let mut net = init_denoiser(tiny_denoiser_config(), 25).unwrap();
        let log = train_ldm(&mut net, &latents, &schedule, &cfg, 25, |_, _| Ok(())).unwrap();
        (log, net.params.iter().flat_map(|p| p.value.data().to_vec()).map(f32::to_bits).collect::<Vec<_>>())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.0.len(), 12);
    assert_eq!(vae.to_checkpoint(true, "", 0).encode().unwrap(), before);
}

#[test]
fn resumed_ldm_training_is_bitwise_identical() {
    let latents = single_context(26);
    let schedule = cosine_schedule(20).unwrap();
    let cfg = |steps| LdmTrainConfig { steps, batch: 2, adam: AdamConfig::default() };
    let mut full = init_denoiser(tiny_denoiser_config(), 26).unwrap();
    let full_log = train_ldm(&mut full, &latents, &schedule, &cfg(8), 26, |_, _| Ok(())).unwrap();

    let mut half = init_denoiser(tiny_denoiser_config(), 26).unwrap();
    let mut log = train_ldm(&mut half, &latents, &schedule, &cfg(4), 26, |_, _| Ok(())).unwrap();
    let mut ckpt = scope_core::volume_io::Checkpoint::default();
    ckpt.put_params("d", &half.params, true);
    let ckpt = scope_core::volume_io::Checkpoint::decode(&ckpt.encode().unwrap()).unwrap();
    let mut resumed = init_denoiser(tiny_denoiser_config(), 999).unwrap();
    ckpt.load_params("d", &mut resumed.params).unwrap();
    log.extend(train_ldm(&mut resumed, &latents, &schedule, &cfg(8), 26, |_, _| Ok(())).unwrap());
    assert_eq!(log, full_log);
    for (a, b) in full.params.iter().zip(resumed.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn short_volume_is_data_error() {
    let mut net = init_denoiser(tiny_denoiser_config(), 0).unwrap();
    let short = vec![Tensor::<f32>::zeros(&[8, TINY_DIM])];
    let cfg = LdmTrainConfig { steps: 1, batch: 1, adam: AdamConfig::default() };
    let r = train_ldm(&mut net, &short, &cosine_schedule(10).unwrap(), &cfg, 0, |_, _| Ok(()));
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn latent_width_mismatch_is_config_error() {
    let vae = tiny_vae(0);
    let mut rng = keyed(0, 0, 0);
    let vols = vec![random_volume(&mut rng, TINY_SIDE, 16)];
    assert!(matches!(prepare_latents(&vae, &vols, TINY_DIM * 2), Err(Error::Config(_))));
}
