use rand::Rng;

use crate::diffcore::{Graph, Layer, LayerSpec, ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};

use super::schedule::{q_sample, NoisePredictor, NoiseSchedule};

/// Number of 2× downsampling levels.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Rows of the latent context (`N_s`).
    pub n_s: usize,
    /// Columns of the latent context (`D`).
    pub latent_dim: usize,
    /// Channels at each of the four levels.
    pub channels: [usize; LEVELS],
    pub groups: usize,
    /// Width of the sinusoidal time embedding.
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { n_s: 16, latent_dim: 64, channels: [32, 32, 64, 64], groups: 8, time_dim: 32 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let m = 1 << LEVELS;
        if self.n_s == 0 || self.n_s % m != 0 || self.latent_dim == 0 || self.latent_dim % m != 0 {
            return Err(Error::Config(format!("latent context {}x{} must be divisible by {m} in both axes", self.n_s, self.latent_dim)));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim must be even, got {}", self.time_dim)));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            let up_in = c + if i + 1 < LEVELS { self.channels[i + 1] } else { c };
            if c == 0 || c % self.groups != 0 || up_in % self.groups != 0 {
                return Err(Error::Config(format!("denoiser channels {:?} incompatible with {} groups", self.channels, self.groups)));
            }
        }
        Ok(())
    }
}

/// U-Net noise predictor over a 1-channel `N_s × D` latent image.
pub struct Denoiser<F: Scalar> {
    pub config: DenoiserConfig,
    pub params: ParamSet<F>,
    time_in: Layer,
    time_out: Layer,
    conv_in: Layer,
    down: Vec<Layer>,
    mid: Layer,
    up: Vec<Layer>,
    norm_out: Layer,
    conv_out: Layer,
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let emb = 4 * config.time_dim;
        let g = config.groups;
        let mut ps = ParamSet::new();
        let time_in = Layer::build("time.fc1", LayerSpec::Linear { in_features: config.time_dim, out_features: emb }, &mut ps, rng)?;
        let time_out = Layer::build("time.fc2", LayerSpec::Linear { in_features: emb, out_features: emb }, &mut ps, rng)?;
        let conv_in = Layer::build("conv_in", LayerSpec::Conv2d { in_ch: 1, out_ch: ch[0], kernel: 3, stride: 1, pad: 1 }, &mut ps, rng)?;
        let mut down = Vec::new();
        for i in 0..LEVELS {
            let in_ch = if i == 0 { ch[0] } else { ch[i - 1] };
            down.push(Layer::build(&format!("down{i}"), LayerSpec::ResidualBlock { in_ch, out_ch: ch[i], groups: g, emb_dim: Some(emb) }, &mut ps, rng)?);
        }
        let last = ch[LEVELS - 1];
        let mid = Layer::build("mid", LayerSpec::ResidualBlock { in_ch: last, out_ch: last, groups: g, emb_dim: Some(emb) }, &mut ps, rng)?;
        let mut up = Vec::new();
        for i in 0..LEVELS {
            let below = if i + 1 < LEVELS { ch[i + 1] } else { last };
            up.push(Layer::build(&format!("up{i}"), LayerSpec::ResidualBlock { in_ch: below + ch[i], out_ch: ch[i], groups: g, emb_dim: Some(emb) }, &mut ps, rng)?);
        }
        let norm_out = Layer::build("norm_out", LayerSpec::GroupNorm { channels: ch[0], groups: g }, &mut ps, rng)?;
        let conv_out = Layer::build("conv_out", LayerSpec::Conv2d { in_ch: ch[0], out_ch: 1, kernel: 3, stride: 1, pad: 1 }, &mut ps, rng)?;
        // Start as a zero predictor; the output layer learns from there.
        for name in ["conv_out.weight", "conv_out.bias"] {
            let id = ps.id(name).expect("just built");
            ps.get_mut(id).value.data_mut().iter_mut().for_each(|w| *w = F::zero());
        }
        Ok(Self { config, params: ps, time_in, time_out, conv_in, down, mid, up, norm_out, conv_out })
    }

    /// `z_t` is `[B, N_s, D]` (or `[B, 1, N_s, D]`), `t` holds one step per
    /// batch element. Returns the predicted noise as `[B, 1, N_s, D]`.
    pub fn forward(&self, g: &mut Graph<F>, z_t: Var, t: &[usize]) -> Result<Var> {
        let (n_s, d) = (self.config.n_s, self.config.latent_dim);
        let shape = g.value(z_t).shape().to_vec();
        let b = shape[0];
        let ok = match shape.as_slice() {
            [_, r, c] => *r == n_s && *c == d,
            [_, 1, r, c] => *r == n_s && *c == d,
            _ => false,
        };
        if !ok || t.len() != b {
            return Err(Error::Shape(format!("denoiser expects [B, {n_s}, {d}] with B times, got {shape:?} and {} times", t.len())));
        }
        let x = g.reshape(z_t, &[b, 1, n_s, d])?;
        g.set_scope("time");
        let tv = g.input(Tensor::new(&[b], t.iter().map(|&s| F::of(s as f64)).collect())?)?;
        let mut emb = g.time_embedding(tv, self.config.time_dim)?;
        emb = self.time_in.forward(g, &self.params, emb, None)?;
        emb = g.silu(emb)?;
        emb = self.time_out.forward(g, &self.params, emb, None)?;

        let mut h = self.conv_in.forward(g, &self.params, x, None)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for blk in &self.down {
            h = blk.forward(g, &self.params, h, Some(emb))?;
            skips.push(h);
            g.set_scope(format!("{}.pool", blk.name));
            h = g.avg_pool2(h)?;
        }
        h = self.mid.forward(g, &self.params, h, Some(emb))?;
        for (blk, skip) in self.up.iter().zip(skips).rev() {
            g.set_scope(format!("{}.upsample", blk.name));
            h = g.upsample_nearest2(h)?;
            h = g.concat_channels(h, skip)?;
            h = blk.forward(g, &self.params, h, Some(emb))?;
        }
        h = self.norm_out.forward(g, &self.params, h, None)?;
        h = g.silu(h)?;
        self.conv_out.forward(g, &self.params, h, None)
    }

    /// Records the noise-prediction loss for a batch: `z0` and `eps` are
    /// `[B, N_s, D]`, `t[b]` the step of element `b`.
    pub fn loss_graph(&self, g: &mut Graph<F>, z0: &Tensor<F>, t: &[usize], eps: &Tensor<F>, schedule: &NoiseSchedule) -> Result<(Var, Var)> {
        z0.same_shape(eps)?;
        let b = z0.shape()[0];
        if t.len() != b {
            return Err(Error::Shape(format!("{} steps for batch of {b}", t.len())));
        }
        let mut parts = Vec::with_capacity(b);
        for (i, &ti) in t.iter().enumerate() {
            parts.push(q_sample(&z0.rows(i, 1)?, ti, &eps.rows(i, 1)?, schedule)?);
        }
        let zt = g.input(Tensor::stack_rows(&parts)?)?;
        let pred = self.forward(g, zt, t)?;
        g.set_scope("ldm.loss");
        let target = eps.clone().reshape(g.value(pred).shape())?;
        Ok((g.mean_sq_diff(pred, &target)?, pred))
    }
}

impl NoisePredictor for Denoiser<f32> {
    fn predict_noise(&self, z_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let (n_s, d) = (self.config.n_s, self.config.latent_dim);
        let batched =
            z_t.clone().reshape(&[z_t.len() / (n_s * d).max(1), n_s, d]).map_err(|_| Error::Shape(format!("context {:?} is not a multiple of {n_s}x{d}", z_t.shape())))?;
        let b = batched.shape()[0];
        let mut g = Graph::new();
        let x = g.input(batched)?;
        let out = self.forward(&mut g, x, &vec![t; b])?;
        g.value(out).clone().reshape(z_t.shape())
    }
}
