//! Zero-shot FOV extension: reverse diffusion with acquired latent rows
//! composited back in at every step, then decoding of the generated rows.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::diffcore::Tensor;
use crate::diffusion::{encode_volume, p_sample_step, q_sample, LatentDiffusion, NoisePredictor, NoiseSchedule, SigmaMode};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::preprocess::NormalizedVolume;
use crate::rng::{field, keyed, normal_tensor, standard_normal};
use crate::vae::VaeModel;

/// Per-row flags of a latent context: `true` marks an acquired row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceMask(pub Vec<bool>);

impl SliceMask {
    /// First `acquired` rows known, the rest to impute.
    pub fn leading(n_s: usize, acquired: usize) -> Self {
        Self((0..n_s).map(|i| i < acquired).collect())
    }

    /// Last `acquired` rows known.
    pub fn trailing(n_s: usize, acquired: usize) -> Self {
        Self((0..n_s).map(|i| i + acquired >= n_s).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn n_acquired(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

fn check_rows(z: &Tensor<f32>, mask: &SliceMask, what: &str) -> Result<usize> {
    match *z.shape() {
        [r, d] if r == mask.len() => Ok(d),
        ref s => Err(Error::Shape(format!("{what}: context {s:?} vs mask of {} rows", mask.len()))),
    }
}

/// `z_t ∘ M + ẑ_t ∘ (1 − M)` with the mask broadcast along rows, where the
/// known branch is the acquired latents noised to level `t` with fresh noise.
pub fn apply_mask_guidance(zhat_t: &Tensor<f32>, z0_known: &Tensor<f32>, mask: &SliceMask, t: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let d = check_rows(zhat_t, mask, "estimate")?;
    zhat_t.same_shape(z0_known)?;
    schedule.check_t(t)?;
    let mut out = zhat_t.clone();
    for (r, &known) in mask.0.iter().enumerate() {
        if !known {
            continue;
        }
        let row = z0_known.rows(r, 1)?;
        if !row.all_finite() {
            return Err(Error::numeric("apply_mask_guidance", format!("acquired row {r} is not finite")));
        }
        let eps = normal_tensor::<f32>(&[1, d], rng);
        let noisy = q_sample(&row, t, &eps, schedule)?;
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(noisy.data());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InpaintOptions {
    pub sigma_mode: SigmaMode,
    /// Extra re-noise/denoise passes per step; 0 is a single reverse pass.
    pub resample_repeats: usize,
}

/// Reverse diffusion from pure noise with masked guidance at every step.
/// Acquired rows of the result are the exact input rows.
pub fn inpaint_context(
    model: &impl NoisePredictor,
    z0_known: &Tensor<f32>,
    mask: &SliceMask,
    schedule: &NoiseSchedule,
    options: InpaintOptions,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let d = check_rows(z0_known, mask, "inpaint")?;
    if mask.n_acquired() == mask.len() {
        return Ok(z0_known.clone());
    }
    let mut z = normal_tensor::<f32>(z0_known.shape(), rng);
    for t in (1..=schedule.steps()).rev() {
        for r in 0..=options.resample_repeats {
            let guided = apply_mask_guidance(&z, z0_known, mask, t, schedule, rng)?;
            z = p_sample_step(model, &guided, t, schedule, rng, options.sigma_mode)?;
            if r < options.resample_repeats && t > 1 {
                let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
                z = Tensor::from_fn(z.shape(), |i| (a * z.data()[i] as f64 + b * standard_normal::<f64>(rng)) as f32);
            }
        }
    }
    for (r, &known) in mask.0.iter().enumerate() {
        if known {
            z.data_mut()[r * d..(r + 1) * d].copy_from_slice(&z0_known.data()[r * d..(r + 1) * d]);
        }
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Append slices after the last one (increasing z).
    Inferior,
    /// Prepend slices before the first one (decreasing z).
    Superior,
}

impl Direction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inferior" => Some(Self::Inferior),
            "superior" => Some(Self::Superior),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtensionPlan {
    pub direction: Direction,
    pub n_new: usize,
    /// Fewest acquired-or-generated slices a window conditions on.
    pub min_context: usize,
    /// Most slices generated per window.
    pub per_window: usize,
    pub inpaint: InpaintOptions,
}

impl ExtensionPlan {
    /// Half the context conditions, half is generated per window.
    pub fn new(direction: Direction, n_new: usize, n_s: usize) -> Self {
        Self { direction, n_new, min_context: n_s / 2, per_window: n_s - n_s / 2, inpaint: InpaintOptions::default() }
    }

    pub fn validate(&self, n_s: usize) -> Result<()> {
        if self.min_context == 0 || self.per_window == 0 || self.min_context + self.per_window > n_s {
            return Err(Error::Config(format!(
                "extension plan needs min_context ≥ 1, per_window ≥ 1 and min_context + per_window ≤ {n_s}, got {} + {}",
                self.min_context, self.per_window
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowRecord {
    /// Conditioning rows in this window.
    pub context: usize,
    /// Rows imputed by the sampler (including any discarded tail).
    pub imputed: usize,
    /// Rows kept as new slices.
    pub kept: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtensionRecord {
    pub direction: Direction,
    pub n_new: usize,
    pub slice_thickness_mm: f64,
    pub added_mm: f64,
    pub z_origin_before: f64,
    pub z_origin_after: f64,
    pub windows: Vec<WindowRecord>,
    pub elapsed_ms: u128,
}

pub struct Extension {
    pub volume: NormalizedVolume,
    pub record: ExtensionRecord,
}

/// Extends `volume` by `plan.n_new` slices in `plan.direction`. Acquired
/// slices are copied into the output, never passed through the decoder.
/// Windows slide autoregressively: each conditions on up to
/// `N_s − generated` slices nearest the extension end.
pub fn extend_fov(volume: &NormalizedVolume, plan: &ExtensionPlan, vae: &VaeModel<f32>, ldm: &LatentDiffusion, rng: &mut impl Rng) -> Result<Extension> {
    let started = Instant::now();
    let n_s = ldm.n_s();
    plan.validate(n_s)?;
    let [nx, ny, ns] = volume.dims();
    if nx != vae.config.slice_size || ny != vae.config.slice_size {
        return Err(Error::Shape(format!("slices are {nx}x{ny}, vae expects {0}x{0}", vae.config.slice_size)));
    }
    if vae.config.latent_dim != ldm.denoiser.config.latent_dim {
        return Err(Error::Config(format!("vae latent_dim {} vs denoiser {}", vae.config.latent_dim, ldm.denoiser.config.latent_dim)));
    }
    if ns < plan.min_context {
        return Err(Error::InsufficientContext { have: ns, need: plan.min_context });
    }
    let dz = volume.spacing()[2];
    let mut record = ExtensionRecord {
        direction: plan.direction,
        n_new: plan.n_new,
        slice_thickness_mm: dz,
        added_mm: plan.n_new as f64 * dz,
        z_origin_before: volume.z_origin(),
        z_origin_after: volume.z_origin(),
        windows: Vec::new(),
        elapsed_ms: 0,
    };
    if plan.n_new == 0 {
        record.elapsed_ms = started.elapsed().as_millis();
        return Ok(Extension { volume: volume.clone(), record });
    }

    let d = ldm.stats.dim();
    let latents = ldm.stats.standardize(&encode_volume(vae, volume)?);
    // Rows ordered from the far end towards the extension end.
    let mut seq: Vec<Vec<f32>> = latents.data().chunks(d).map(<[f32]>::to_vec).collect();
    if plan.direction == Direction::Superior {
        seq.reverse();
    }
    let mut generated: Vec<Vec<f32>> = Vec::new();
    let mut remaining = plan.n_new;
    while remaining > 0 {
        let gen = remaining.min(plan.per_window);
        let context = seq.len().min(n_s - gen);
        let imputed = n_s - context;
        let ctx_rows = &seq[seq.len() - context..];
        // Window rows in anatomical order: context first for inferior,
        // generated block first for superior.
        let mut known = vec![0.0f32; n_s * d];
        let mask = match plan.direction {
            Direction::Inferior => {
                for (i, row) in ctx_rows.iter().enumerate() {
                    known[i * d..(i + 1) * d].copy_from_slice(row);
                }
                SliceMask::leading(n_s, context)
            }
            Direction::Superior => {
                for (i, row) in ctx_rows.iter().rev().enumerate() {
                    let r = n_s - context + i;
                    known[r * d..(r + 1) * d].copy_from_slice(row);
                }
                SliceMask::trailing(n_s, context)
            }
        };
        let known = Tensor::new(&[n_s, d], known)?;
        let seed: u64 = rng.random();
        let mut wrng = keyed(seed, record.windows.len() as u64, field::EXTEND);
        let out = inpaint_context(&ldm.denoiser, &known, &mask, &ldm.schedule, plan.inpaint, &mut wrng)?;
        for k in 0..gen {
            let r = match plan.direction {
                Direction::Inferior => context + k,
                Direction::Superior => n_s - 1 - context - k,
            };
            let row = out.data()[r * d..(r + 1) * d].to_vec();
            seq.push(row.clone());
            generated.push(row);
        }
        record.windows.push(WindowRecord { context, imputed, kept: gen, seed });
        remaining -= gen;
    }

    let z = ldm.stats.destandardize(&Tensor::new(&[generated.len(), d], generated.concat())?);
    let mut new_slices = vae.decode_slices(&z)?;
    for s in &mut new_slices {
        s.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    let mut data = Vec::with_capacity(nx * ny * (ns + plan.n_new));
    let z_origin = match plan.direction {
        Direction::Inferior => {
            data.extend_from_slice(volume.data());
            new_slices.iter().for_each(|s| data.extend_from_slice(s));
            volume.z_origin()
        }
        Direction::Superior => {
            // Generated in order of increasing distance; the farthest comes first.
            new_slices.iter().rev().for_each(|s| data.extend_from_slice(s));
            data.extend_from_slice(volume.data());
            volume.z_origin() - plan.n_new as f64 * dz
        }
    };
    let grid = Grid::new([nx, ny, ns + plan.n_new], volume.spacing(), z_origin, data)?;
    record.z_origin_after = z_origin;
    record.elapsed_ms = started.elapsed().as_millis();
    Ok(Extension { volume: NormalizedVolume::new(grid)?, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::cosine_schedule;

    #[test]
    fn mask_constructors() {
        assert_eq!(SliceMask::leading(4, 1).0, vec![true, false, false, false]);
        assert_eq!(SliceMask::trailing(4, 1).0, vec![false, false, false, true]);
    }

    #[test]
    fn mask_length_mismatch_is_shape_error() {
        let s = cosine_schedule(10).unwrap();
        let z = Tensor::<f32>::zeros(&[4, 2]);
        let mut rng = keyed(0, 0, 0);
        let r = apply_mask_guidance(&z, &z, &SliceMask::leading(3, 1), 5, &s, &mut rng);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn plan_bounds() {
        let mut p = ExtensionPlan::new(Direction::Inferior, 5, 16);
        assert!(p.validate(16).is_ok());
        p.per_window = 9;
        assert!(matches!(p.validate(16), Err(Error::Config(_))));
    }
}
