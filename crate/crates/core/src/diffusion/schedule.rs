use rand::Rng;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Per-step noise levels, indexed `1..=T`; index 0 holds `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, with
/// `β_t = 1 − ᾱ_t/ᾱ_{t−1}` clipped to 0.999 and `ᾱ` re-accumulated from the
/// clipped betas.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion steps must be at least 2, got {steps}")));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut beta = vec![0.0];
    let mut alpha = vec![1.0];
    let mut alpha_bar = vec![1.0];
    for t in 1..=steps {
        let b = (1.0 - (f(t) / f0) / (f(t - 1) / f0)).min(MAX_BETA);
        beta.push(b);
        alpha.push(1.0 - b);
        alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!("diffusion step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `β̃_t = β_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn q_sample<F: Scalar>(z0: &Tensor<F>, t: usize, eps: &Tensor<F>, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Variance of the reverse step's added noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SigmaMode {
    /// `σ_t² = β̃_t`.
    #[default]
    Posterior,
    /// `σ_t² = β_t`.
    Beta,
    /// Deterministic mean only.
    Zero,
}

impl SigmaMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "posterior" => Some(Self::Posterior),
            "beta" => Some(Self::Beta),
            "zero" => Some(Self::Zero),
            _ => None,
        }
    }

    pub fn sigma(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        if t == 1 {
            return 0.0;
        }
        match self {
            Self::Posterior => schedule.posterior_variance(t).sqrt(),
            Self::Beta => schedule.beta(t).sqrt(),
            Self::Zero => 0.0,
        }
    }
}

/// Anything that predicts the noise in `z_t`; the learned denoiser and the
/// analytic fixtures used in tests both implement it.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;
}

/// Mean over elements of `(eps − ε_θ(q_sample(z0, t, eps); t))²`.
pub fn ldm_loss(model: &impl NoisePredictor, z0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, schedule: &NoiseSchedule) -> Result<f64> {
    let zt = q_sample(z0, t, eps, schedule)?;
    let pred = model.predict_noise(&zt, t)?;
    pred.same_shape(eps)?;
    let loss = pred.data().iter().zip(eps.data()).map(|(&p, &e)| (p as f64 - e as f64).powi(2)).sum::<f64>() / eps.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("ldm_loss", format!("loss is {loss} at t={t}")));
    }
    Ok(loss)
}

/// One reverse step `z_t → z_{t−1}`.
pub fn p_sample_step(model: &impl NoisePredictor, z_t: &Tensor<f32>, t: usize, schedule: &NoiseSchedule, rng: &mut impl Rng, sigma_mode: SigmaMode) -> Result<Tensor<f32>> {
    schedule.check_t(t)?;
    let eps = model.predict_noise(z_t, t)?;
    eps.same_shape(z_t)?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = sigma_mode.sigma(schedule, t);
    let mut out = Vec::with_capacity(z_t.len());
    for (&z, &e) in z_t.data().iter().zip(eps.data()) {
        let mean = inv_sqrt_alpha * (z as f64 - coef * e as f64);
        let noise = if sigma > 0.0 { sigma * standard_normal::<f64>(rng) } else { 0.0 };
        out.push((mean + noise) as f32);
    }
    let out = Tensor::new(z_t.shape(), out)?;
    if !out.all_finite() {
        return Err(Error::numeric("p_sample_step", format!("non-finite sample at t={t}")));
    }
    Ok(out)
}

/// Full ancestral sampling from `z_T ~ N(0, I)` down to `z_0`.
pub fn sample(model: &impl NoisePredictor, shape: &[usize], schedule: &NoiseSchedule, rng: &mut impl Rng, sigma_mode: SigmaMode) -> Result<Tensor<f32>> {
    let mut z = crate::rng::normal_tensor::<f32>(shape, rng);
    for t in (1..=schedule.steps()).rev() {
        z = p_sample_step(model, &z, t, schedule, rng, sigma_mode)?;
    }
    Ok(z)
}

/// Closed-form optimal noise predictor for data whose elements are i.i.d.
/// `N(0, v)`: `E[ε | z_t] = √(1−ᾱ_t)·z_t / (ᾱ_t·v + 1 − ᾱ_t)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub variance: f64,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for GaussianOracle {
    fn predict_noise(&self, z_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let ab = self.schedule.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * self.variance + 1.0 - ab);
        Ok(z_t.map(|z| (k * z as f64) as f32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_steps_is_config_error() {
        assert!(matches!(cosine_schedule(1), Err(Error::Config(_))));
    }

    #[test]
    fn first_posterior_variance_is_zero() {
        let s = cosine_schedule(50).unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert!(s.posterior_variance(2) > 0.0);
    }

    #[test]
    fn zero_predictor_divides_by_sqrt_alpha() {
        struct Zero;
        impl NoisePredictor for Zero {
            fn predict_noise(&self, z: &Tensor<f32>, _: usize) -> Result<Tensor<f32>> {
                Ok(Tensor::zeros(z.shape()))
            }
        }
        let s = cosine_schedule(20).unwrap();
        let z = Tensor::new(&[2, 2], vec![1.0f32, -2.0, 0.5, 3.0]).unwrap();
        let mut rng = crate::rng::keyed(0, 0, 0);
        let out = p_sample_step(&Zero, &z, 7, &s, &mut rng, SigmaMode::Zero).unwrap();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((*o as f64 - *i as f64 / s.alpha(7).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn step_out_of_range() {
        let s = cosine_schedule(10).unwrap();
        let z = Tensor::<f32>::zeros(&[1, 1]);
        assert!(matches!(q_sample(&z, 0, &z, &s), Err(Error::Range(_))));
        assert!(matches!(q_sample(&z, 11, &z, &s), Err(Error::Range(_))));
    }
}
