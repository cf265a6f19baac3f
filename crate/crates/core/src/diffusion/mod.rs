//! Noise schedule, forward process, latent-context denoiser, its training
//! loss and the single reverse step.

mod schedule;
mod unet;

use rand::Rng;

pub use schedule::{cosine_schedule, ldm_loss, p_sample_step, q_sample, sample, GaussianOracle, NoisePredictor, NoiseSchedule, SigmaMode, COSINE_OFFSET, MAX_BETA};
pub use unet::{Denoiser, DenoiserConfig, LEVELS};

use crate::diffcore::{AdamConfig, Graph, Tensor};
use crate::error::{Error, Result};
use crate::preprocess::NormalizedVolume;
use crate::rng::{field, keyed, normal_tensor};
use crate::vae::VaeModel;
use crate::volume_io::{Checkpoint, NamedTensor};

/// `N_s × D` stack of per-slice latents taken from consecutive slices.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentContext {
    pub matrix: Tensor<f32>,
    pub start_index: usize,
}

impl LatentContext {
    pub fn new(matrix: Tensor<f32>, start_index: usize) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::Shape(format!("latent context must be 2-D, got {:?}", matrix.shape())));
        }
        if !matrix.all_finite() {
            return Err(Error::numeric("latent_context", "non-finite latent"));
        }
        Ok(Self { matrix, start_index })
    }

    pub fn n_s(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// Per-coordinate mean and standard deviation of the training latents. The
/// diffusion model works on standardized latents so that its unit-variance
/// prior matches the data scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Statistics over every row of every `[S_i, D]` matrix.
    pub fn fit(latents: &[Tensor<f32>]) -> Result<Self> {
        let d = latents.first().map(|m| m.shape()[1]).ok_or_else(|| Error::Data("no latents to fit".into()))?;
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for m in latents {
            if m.shape()[1] != d {
                return Err(Error::Shape(format!("latent width {} vs {d}", m.shape()[1])));
            }
            for row in m.data().chunks(d) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64).powi(2);
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-4)) as f32).collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, m: &Tensor<f32>) -> Tensor<f32> {
        let d = self.dim();
        Tensor::from_fn(m.shape(), |i| (m.data()[i] - self.mean[i % d]) / self.std[i % d])
    }

    pub fn destandardize(&self, m: &Tensor<f32>) -> Tensor<f32> {
        let d = self.dim();
        Tensor::from_fn(m.shape(), |i| m.data()[i] * self.std[i % d] + self.mean[i % d])
    }
}

/// Posterior means of every slice of `volume`, as `[S, D]`.
pub fn encode_volume(vae: &VaeModel<f32>, volume: &NormalizedVolume) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let mut k = 0;
    while k < volume.n_slices() {
        let end = (k + 32).min(volume.n_slices());
        let slices: Vec<&[f32]> = (k..end).map(|i| volume.slice(i)).collect();
        parts.push(vae.encode_means(&slices)?);
        k = end;
    }
    Tensor::stack_rows(&parts)
}

/// A trained denoiser together with everything needed to sample from it.
pub struct LatentDiffusion {
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub stats: LatentStats,
    pub sigma_mode: SigmaMode,
}

impl LatentDiffusion {
    pub fn n_s(&self) -> usize {
        self.denoiser.config.n_s
    }

    pub fn to_checkpoint(&self, optimizer: bool, config_echo: &str, seed: u64) -> Checkpoint {
        let mut c = Checkpoint { config: config_echo.to_string(), rng_seed: seed, ..Default::default() };
        c.put_params("ldm.denoiser", &self.denoiser.params, optimizer);
        let d = self.stats.dim();
        c.push(NamedTensor::f32("ldm.latent_mean", &Tensor::new(&[d], self.stats.mean.clone()).expect("dim")));
        c.push(NamedTensor::f32("ldm.latent_std", &Tensor::new(&[d], self.stats.std.clone()).expect("dim")));
        c.push(NamedTensor::f64("ldm.steps", &[1], &[self.schedule.steps() as f64]));
        c
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let steps = ckpt.get("ldm.steps")?.to_f64()?[0] as usize;
        if steps != self.schedule.steps() {
            return Err(Error::Config(format!("checkpoint trained with T={steps}, config has T={}", self.schedule.steps())));
        }
        ckpt.load_params("ldm.denoiser", &mut self.denoiser.params)?;
        let mean = ckpt.get("ldm.latent_mean")?.to_f32()?.into_data();
        let std = ckpt.get("ldm.latent_std")?.to_f32()?.into_data();
        if mean.len() != self.denoiser.config.latent_dim || std.len() != mean.len() {
            return Err(Error::Config(format!("checkpoint latent width {} vs denoiser {}", mean.len(), self.denoiser.config.latent_dim)));
        }
        self.stats = LatentStats { mean, std };
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdmTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
}

/// One training sample's loss. A step with batch `B` emits `B` records.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LdmLossRecord {
    pub step: u64,
    pub t: usize,
    pub loss: f64,
}

/// Mean loss of each step in `log`, in step order.
pub fn step_means(log: &[LdmLossRecord]) -> Vec<f64> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((s, sum, n)) if *s == r.step => {
                *sum += r.loss;
                *n += 1;
            }
            _ => out.push((r.step, r.loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

/// Encodes every volume through the frozen VAE and fits latent statistics.
/// Returns the standardized `[S_i, D]` latents and the statistics.
pub fn prepare_latents(vae: &VaeModel<f32>, volumes: &[NormalizedVolume], latent_dim: usize) -> Result<(Vec<Tensor<f32>>, LatentStats)> {
    if vae.config.latent_dim != latent_dim {
        return Err(Error::Config(format!("vae latent_dim {} does not match denoiser latent_dim {latent_dim}", vae.config.latent_dim)));
    }
    if volumes.is_empty() {
        return Err(Error::Data("no training volumes".into()));
    }
    let raw = volumes.iter().map(|v| encode_volume(vae, v)).collect::<Result<Vec<_>>>()?;
    let stats = LatentStats::fit(&raw)?;
    Ok((raw.iter().map(|m| stats.standardize(m)).collect(), stats))
}

/// Adam on the noise-prediction loss from the denoiser's current step count
/// up to `cfg.steps`. Step `i` draws segments, steps and noise from the
/// stream keyed by `(seed, i)`.
pub fn train_ldm(
    denoiser: &mut Denoiser<f32>,
    latents: &[Tensor<f32>],
    schedule: &NoiseSchedule,
    cfg: &LdmTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&Denoiser<f32>, &[LdmLossRecord]) -> Result<()>,
) -> Result<Vec<LdmLossRecord>> {
    let (n_s, d) = (denoiser.config.n_s, denoiser.config.latent_dim);
    if cfg.batch == 0 {
        return Err(Error::Config("ldm batch must be positive".into()));
    }
    if latents.is_empty() {
        return Err(Error::Data("no latent volumes to train on".into()));
    }
    for m in latents {
        if m.shape()[1] != d {
            return Err(Error::Config(format!("latent width {} does not match denoiser latent_dim {d}", m.shape()[1])));
        }
        if m.shape()[0] < n_s {
            return Err(Error::Data(format!("volume with {} slices is shorter than N_s = {n_s}", m.shape()[0])));
        }
    }
    let mut log = Vec::new();
    for step in denoiser.params.step_count()..cfg.steps {
        let mut rng = keyed(seed, step, field::LDM_STEP);
        let mut parts = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let v = &latents[rng.random_range(0..latents.len())];
            let start = rng.random_range(0..=v.shape()[0] - n_s);
            parts.push(v.rows(start, n_s)?.reshape(&[1, n_s, d])?);
            ts.push(rng.random_range(1..=schedule.steps()));
        }
        let z0 = Tensor::stack_rows(&parts)?;
        let eps = normal_tensor::<f32>(&[cfg.batch, n_s, d], &mut rng);
        let at_step = |e: Error| match e {
            Error::Numeric { layer, msg } => Error::Numeric { layer: format!("train_ldm step {step}: {layer}"), msg },
            other => other,
        };
        let mut g = Graph::new();
        let (loss, pred) = denoiser.loss_graph(&mut g, &z0, &ts, &eps, schedule).map_err(at_step)?;
        g.backward(loss).map_err(at_step)?;
        denoiser.params.zero_grad();
        g.accumulate_param_grads(&mut denoiser.params)?;
        denoiser.params.adam_step(&cfg.adam).map_err(at_step)?;

        let per = n_s * d;
        let records: Vec<LdmLossRecord> = ts
            .iter()
            .enumerate()
            .map(|(b, &t)| {
                let p = &g.value(pred).data()[b * per..(b + 1) * per];
                let e = &eps.data()[b * per..(b + 1) * per];
                let loss = p.iter().zip(e).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / per as f64;
                LdmLossRecord { step, t, loss }
            })
            .collect();
        on_step(denoiser, &records)?;
        log.extend(records);
    }
    Ok(log)
}

/// Denoiser initialized from the stream keyed by `(seed, 0, LDM_INIT)`.
pub fn init_denoiser(config: DenoiserConfig, seed: u64) -> Result<Denoiser<f32>> {
    Denoiser::new(config, &mut keyed(seed, 0, field::LDM_INIT))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_standardize_round_trip() {
        let m = Tensor::new(&[3, 2], vec![1.0f32, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let s = LatentStats::fit(std::slice::from_ref(&m)).unwrap();
        assert!((s.mean[1] - 20.0).abs() < 1e-5);
        let z = s.standardize(&m);
        let back = s.destandardize(&z);
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn indivisible_context_is_config_error() {
        let cfg = DenoiserConfig { n_s: 12, ..Default::default() };
        assert!(matches!(init_denoiser(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_denoiser_predicts_zero() {
        let cfg = DenoiserConfig { n_s: 16, latent_dim: 16, channels: [4, 4, 4, 4], groups: 2, time_dim: 8 };
        let d = init_denoiser(cfg, 3).unwrap();
        let z = Tensor::from_fn(&[16, 16], |i| (i as f32 * 0.1).sin());
        let out = d.predict_noise(&z, 5).unwrap();
        assert_eq!(out.shape(), &[16, 16]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
