use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

/// Hyperparameters of the Adam optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Ordered named parameters with gradient and Adam moment slots.
#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    uid: u64,
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { uid: NEXT_UID.fetch_add(1, Ordering::Relaxed), params: Vec::new(), index: HashMap::new(), step: 0 }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name `{name}`")));
        }
        let shape = value.shape().to_vec();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: Tensor::zeros(&shape), m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) });
        Ok(ParamId(id))
    }

    /// Adds a tensor drawn from N(0, std²).
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            F::of(z * std)
        });
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, F::of(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Same names and values in another precision; fresh optimizer state.
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }

    /// One Adam update with bias correction, then advances the step counter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for p in &self.params {
            if !p.grad.all_finite() {
                return Err(Error::numeric(format!("adam({})", p.name), "non-finite gradient"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::of(cfg.beta1);
        let b2 = F::of(cfg.beta2);
        let one = F::one();
        let c1 = one - F::of(cfg.beta1.powi(t));
        let c2 = one - F::of(cfg.beta2.powi(t));
        let lr = F::of(cfg.lr);
        let eps = F::of(cfg.eps);
        for p in &mut self.params {
            let n = p.value.len();
            let (g, m, v) = (p.grad.data(), p.m.data_mut(), p.v.data_mut());
            let mut upd = vec![F::zero(); n];
            for i in 0..n {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                upd[i] = lr * mh / (vh.sqrt() + eps);
            }
            for (w, u) in p.value.data_mut().iter_mut().zip(upd) {
                *w = *w - u;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(w: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(w)).unwrap();
        ps
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        ps.get_mut(ParamId(0)).grad = Tensor::new(&[3], vec![2.5, -0.3, 40.0]).unwrap();
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        ps.adam_step(&cfg).unwrap();
        let w = ps.get(ParamId(0)).value.data();
        assert!((w[0] + 0.01).abs() < 1e-8);
        assert!((w[1] - 0.01).abs() < 1e-8);
        assert!((w[2] + 0.01).abs() < 1e-8);
        assert_eq!(ps.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = scalar_set(1.25);
        ps.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(ps.get(ParamId(0)).value.data()[0], 1.25);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut ps = scalar_set(0.0);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        for _ in 0..200 {
            let w = ps.get(ParamId(0)).value.data()[0];
            ps.get_mut(ParamId(0)).grad = Tensor::scalar(2.0 * (w - 3.0));
            ps.adam_step(&cfg).unwrap();
        }
        let w = ps.get(ParamId(0)).value.data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut ps = scalar_set(0.0);
        ps.get_mut(ParamId(0)).grad = Tensor::scalar(f64::NAN);
        assert!(matches!(ps.adam_step(&AdamConfig::default()), Err(Error::Numeric { .. })));
        assert_eq!(ps.step_count(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = scalar_set(0.0);
        assert!(ps.add("w", Tensor::scalar(1.0)).is_err());
    }
}
