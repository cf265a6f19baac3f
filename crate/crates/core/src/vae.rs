//! Slice-wise variational autoencoder: every axial slice is encoded on its own
//! into a `D`-dimensional Gaussian posterior and decoded back.

use rand::Rng;

use crate::diffcore::{AdamConfig, Graph, Layer, LayerSpec, ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::preprocess::NormalizedVolume;
use crate::rng::{field, keyed, normal_tensor, standard_normal};
use crate::volume_io::Checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    /// Side of the square input slice; divisible by 8.
    pub slice_size: usize,
    pub latent_dim: usize,
    /// Channels of the three stride-2 stages.
    pub channels: [usize; 3],
    pub groups: usize,
    /// Weight λ of the KL term.
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { slice_size: 32, latent_dim: 64, channels: [16, 32, 32], groups: 4, kl_weight: 1e-6 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slice_size == 0 || self.slice_size % 8 != 0 {
            return Err(Error::Config(format!("vae slice_size must be a positive multiple of 8, got {}", self.slice_size)));
        }
        if self.latent_dim == 0 || !(self.kl_weight >= 0.0) {
            return Err(Error::Config("vae latent_dim must be positive and kl_weight non-negative".into()));
        }
        if self.channels.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return Err(Error::Config(format!("vae channels {:?} must be multiples of groups {}", self.channels, self.groups)));
        }
        Ok(())
    }

    fn bottleneck(&self) -> usize {
        self.channels[2] * (self.slice_size / 8).pow(2)
    }
}

/// Posterior parameters of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSlice {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

/// `z = μ + exp(logvar/2) ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize(latent: &LatentSlice, rng: &mut impl Rng) -> Vec<f32> {
    latent
        .mu
        .iter()
        .zip(&latent.logvar)
        .map(|(&m, &l)| {
            let e: f64 = standard_normal(rng);
            (m as f64 + (0.5 * l as f64).exp() * e) as f32
        })
        .collect()
}

/// `KL(N(μ, diag e^{logvar}) ‖ N(0, I)) = 0.5·Σ(μ² + e^{logvar} − 1 − logvar)`.
pub fn kl_to_standard_normal(latent: &LatentSlice) -> f64 {
    latent
        .mu
        .iter()
        .zip(&latent.logvar)
        .map(|(&m, &l)| {
            let (m, l) = (m as f64, l as f64);
            0.5 * (m * m + l.exp() - 1.0 - l)
        })
        .sum()
}

pub struct VaeModel<F: Scalar> {
    pub config: VaeConfig,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    pub encoder_params: ParamSet<F>,
    pub decoder_params: ParamSet<F>,
}

/// Graph handles produced by [`VaeModel::loss_graph`].
pub struct VaeLossVars {
    pub total: Var,
    pub recon_l1: Var,
    pub kl: Var,
    pub recon: Var,
}

impl<F: Scalar> VaeModel<F> {
    pub fn new(config: VaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [c0, c1, c2] = config.channels;
        let g = config.groups;
        let mut ep = ParamSet::new();
        let mut dp = ParamSet::new();
        let mut encoder = Vec::new();
        for (i, (cin, cout)) in [(1, c0), (c0, c1), (c1, c2)].into_iter().enumerate() {
            encoder.push(Layer::build(&format!("enc.conv{i}"), LayerSpec::Conv2d { in_ch: cin, out_ch: cout, kernel: 3, stride: 2, pad: 1 }, &mut ep, rng)?);
            encoder.push(Layer::build(&format!("enc.norm{i}"), LayerSpec::GroupNorm { channels: cout, groups: g }, &mut ep, rng)?);
            encoder.push(Layer::build(&format!("enc.act{i}"), LayerSpec::Silu, &mut ep, rng)?);
        }
        encoder.push(Layer::build("enc.head", LayerSpec::Linear { in_features: config.bottleneck(), out_features: 2 * config.latent_dim }, &mut ep, rng)?);

        let mut decoder = vec![
            Layer::build("dec.head", LayerSpec::Linear { in_features: config.latent_dim, out_features: config.bottleneck() }, &mut dp, rng)?,
            Layer::build("dec.act_head", LayerSpec::Silu, &mut dp, rng)?,
        ];
        for (i, (cin, cout)) in [(c2, c1), (c1, c0), (c0, c0)].into_iter().enumerate() {
            decoder.push(Layer::build(&format!("dec.up{i}"), LayerSpec::ConvTranspose2d { in_ch: cin, out_ch: cout, kernel: 4, stride: 2, pad: 1 }, &mut dp, rng)?);
            decoder.push(Layer::build(&format!("dec.norm{i}"), LayerSpec::GroupNorm { channels: cout, groups: g }, &mut dp, rng)?);
            decoder.push(Layer::build(&format!("dec.act{i}"), LayerSpec::Silu, &mut dp, rng)?);
        }
        decoder.push(Layer::build("dec.out", LayerSpec::Conv2d { in_ch: c0, out_ch: 1, kernel: 3, stride: 1, pad: 1 }, &mut dp, rng)?);
        Ok(Self { config, encoder, decoder, encoder_params: ep, decoder_params: dp })
    }

    pub fn num_params(&self) -> usize {
        self.encoder_params.num_scalars() + self.decoder_params.num_scalars()
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<usize> {
        let s = self.config.slice_size;
        match *x.shape() {
            [n, 1, h, w] if h == s && w == s => Ok(n),
            ref other => Err(Error::Shape(format!("vae expects [N, 1, {s}, {s}], got {other:?}"))),
        }
    }

    /// Encoder forward; returns `(mu, logvar)`, each `[N, D]`.
    pub fn encode_graph(&self, g: &mut Graph<F>, x: Var) -> Result<(Var, Var)> {
        let n = g.value(x).shape()[0];
        let mut h = x;
        let (body, head) = self.encoder.split_at(self.encoder.len() - 1);
        for l in body {
            h = l.forward(g, &self.encoder_params, h, None)?;
        }
        h = g.reshape(h, &[n, self.config.bottleneck()])?;
        let out = head[0].forward(g, &self.encoder_params, h, None)?;
        let d = self.config.latent_dim;
        Ok((g.slice_cols(out, 0, d)?, g.slice_cols(out, d, d)?))
    }

    /// Decoder forward from `[N, D]` latents to `[N, 1, S, S]` slices in (−1, 1).
    pub fn decode_graph(&self, g: &mut Graph<F>, z: Var) -> Result<Var> {
        let n = g.value(z).shape()[0];
        let side = self.config.slice_size / 8;
        let mut h = self.decoder[0].forward(g, &self.decoder_params, z, None)?;
        h = self.decoder[1].forward(g, &self.decoder_params, h, None)?;
        h = g.reshape(h, &[n, self.config.channels[2], side, side])?;
        for l in &self.decoder[2..] {
            h = l.forward(g, &self.decoder_params, h, None)?;
        }
        g.set_scope("dec.tanh");
        g.tanh(h)
    }

    /// Records the full loss `mean|x̂ − x| + λ·KL` for a batch with fixed noise.
    pub fn loss_graph(&self, g: &mut Graph<F>, x: &Tensor<F>, eps: &Tensor<F>) -> Result<VaeLossVars> {
        let n = self.check_input(x)?;
        if eps.shape() != [n, self.config.latent_dim] {
            return Err(Error::Shape(format!("eps {:?} for batch {n}", eps.shape())));
        }
        let xv = g.input(x.clone())?;
        let (mu, logvar) = self.encode_graph(g, xv)?;
        g.set_scope("reparameterize");
        let half = g.scale(logvar, 0.5)?;
        let std = g.exp(half)?;
        let e = g.input(eps.clone())?;
        let noise = g.mul(std, e)?;
        let z = g.add(mu, noise)?;
        let recon = self.decode_graph(g, z)?;
        g.set_scope("vae.loss");
        let recon_l1 = g.mean_abs_diff(recon, x)?;
        let kl = g.kl_std_normal(mu, logvar)?;
        let weighted = g.scale(kl, self.config.kl_weight)?;
        let total = g.add(recon_l1, weighted)?;
        Ok(VaeLossVars { total, recon_l1, kl, recon })
    }

    /// Posterior parameters for a batch `[N, 1, S, S]`.
    pub fn encode_batch(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let (mu, lv) = self.encode_graph(&mut g, xv)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn decode_batch(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.latent_dim {
            return Err(Error::Shape(format!("decoder expects [N, {}], got {:?}", self.config.latent_dim, z.shape())));
        }
        let mut g = Graph::new();
        let zv = g.input(z.clone())?;
        let out = self.decode_graph(&mut g, zv)?;
        Ok(g.value(out).clone())
    }
}

impl VaeModel<f32> {
    fn slice_tensor(&self, slices: &[&[f32]]) -> Result<Tensor<f32>> {
        let s = self.config.slice_size;
        let mut data = Vec::with_capacity(slices.len() * s * s);
        for sl in slices {
            if sl.len() != s * s {
                return Err(Error::Shape(format!("slice of {} pixels, model expects {s}x{s}", sl.len())));
            }
            data.extend_from_slice(sl);
        }
        Tensor::new(&[slices.len(), 1, s, s], data)
    }

    pub fn encode(&self, slice: &[f32]) -> Result<LatentSlice> {
        let (mu, lv) = self.encode_batch(&self.slice_tensor(&[slice])?)?;
        Ok(LatentSlice { mu: mu.into_data(), logvar: lv.into_data() })
    }

    /// Encodes a batch of slices, returning `[N, D]` means.
    pub fn encode_means(&self, slices: &[&[f32]]) -> Result<Tensor<f32>> {
        Ok(self.encode_batch(&self.slice_tensor(slices)?)?.0)
    }

    /// Decodes `[N, D]` latents into flat slices.
    pub fn decode_slices(&self, z: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let out = self.decode_batch(z)?;
        let px = self.config.slice_size.pow(2);
        Ok(out.data().chunks(px).map(<[f32]>::to_vec).collect())
    }

    /// Loss on one slice with reparameterization noise from `rng`.
    pub fn vae_loss(&self, slice: &[f32], rng: &mut impl Rng) -> Result<(f32, Vec<f32>)> {
        let x = self.slice_tensor(&[slice])?;
        let eps = normal_tensor(&[1, self.config.latent_dim], rng);
        let mut g = Graph::new();
        let vars = self.loss_graph(&mut g, &x, &eps)?;
        Ok((g.value(vars.total).data()[0], g.value(vars.recon).data().to_vec()))
    }

    /// Reconstructs every slice of a volume through the posterior means.
    pub fn reconstruct_volume(&self, volume: &NormalizedVolume) -> Result<NormalizedVolume> {
        let mut data = Vec::with_capacity(volume.data().len());
        let chunk = 16;
        let mut k = 0;
        while k < volume.n_slices() {
            let end = (k + chunk).min(volume.n_slices());
            let slices: Vec<&[f32]> = (k..end).map(|i| volume.slice(i)).collect();
            let z = self.encode_means(&slices)?;
            for s in self.decode_slices(&z)? {
                data.extend(s);
            }
            k = end;
        }
        NormalizedVolume::new(volume.with_data(data)?)
    }

    pub fn to_checkpoint(&self, optimizer: bool, config_echo: &str, seed: u64) -> Checkpoint {
        let mut c = Checkpoint { config: config_echo.to_string(), rng_seed: seed, ..Default::default() };
        c.put_params("vae.encoder", &self.encoder_params, optimizer);
        c.put_params("vae.decoder", &self.decoder_params, optimizer);
        c
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_params("vae.encoder", &mut self.encoder_params)?;
        ckpt.load_params("vae.decoder", &mut self.decoder_params)
    }
}

// --------------------------------------------------------------- training

/// Pool of normalized volumes whose slices are sampled uniformly.
pub struct SliceDataset {
    volumes: Vec<NormalizedVolume>,
    offsets: Vec<usize>,
}

impl SliceDataset {
    pub fn new(volumes: Vec<NormalizedVolume>) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::Data("slice dataset is empty".into()));
        }
        let first = volumes[0].dims();
        let mut offsets = Vec::with_capacity(volumes.len());
        let mut total = 0;
        for v in &volumes {
            if v.dims()[..2] != first[..2] {
                return Err(Error::Shape(format!("mixed slice shapes {:?} and {:?}", first, v.dims())));
            }
            offsets.push(total);
            total += v.n_slices();
        }
        offsets.push(total);
        Ok(Self { volumes, offsets })
    }

    pub fn volumes(&self) -> &[NormalizedVolume] {
        &self.volumes
    }

    pub fn n_slices(&self) -> usize {
        *self.offsets.last().expect("sentinel")
    }

    pub fn slice(&self, flat: usize) -> &[f32] {
        let v = self.offsets.partition_point(|&o| o <= flat) - 1;
        self.volumes[v].slice(flat - self.offsets[v])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct VaeLossRecord {
    pub step: u64,
    pub recon_l1: f64,
    pub kl: f64,
    pub total: f64,
}

/// Runs minibatch Adam on the VAE loss from the model's current step count up
/// to `cfg.steps`. Step `i` draws its batch and noise from the stream keyed by
/// `(seed, i)`, so a run resumed from a checkpoint with optimizer state
/// continues bitwise-identically.
pub fn train_vae(
    model: &mut VaeModel<f32>,
    data: &SliceDataset,
    cfg: &VaeTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&VaeModel<f32>, &VaeLossRecord) -> Result<()>,
) -> Result<Vec<VaeLossRecord>> {
    if cfg.batch == 0 {
        return Err(Error::Config("vae batch must be positive".into()));
    }
    let s = model.config.slice_size;
    let [nx, ny, _] = data.volumes()[0].dims();
    if nx != s || ny != s {
        return Err(Error::Shape(format!("dataset slices are {nx}x{ny}, model expects {s}x{s}")));
    }
    let mut log = Vec::new();
    let start = model.encoder_params.step_count();
    for step in start..cfg.steps {
        let mut rng = keyed(seed, step, field::VAE_STEP);
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.n_slices())).collect();
        let mut x = Vec::with_capacity(cfg.batch * s * s);
        for &p in &picks {
            x.extend_from_slice(data.slice(p));
        }
        let x = Tensor::new(&[cfg.batch, 1, s, s], x)?;
        let eps = normal_tensor(&[cfg.batch, model.config.latent_dim], &mut rng);
        let at_step = |e: Error| match e {
            Error::Numeric { layer, msg } => Error::Numeric { layer: format!("train_vae step {step}: {layer}"), msg },
            other => other,
        };
        let mut g = Graph::new();
        let vars = model.loss_graph(&mut g, &x, &eps).map_err(at_step)?;
        g.backward(vars.total).map_err(at_step)?;
        model.encoder_params.zero_grad();
        model.decoder_params.zero_grad();
        g.accumulate_param_grads(&mut model.encoder_params)?;
        g.accumulate_param_grads(&mut model.decoder_params)?;
        model.encoder_params.adam_step(&cfg.adam).map_err(at_step)?;
        model.decoder_params.adam_step(&cfg.adam).map_err(at_step)?;
        let rec = VaeLossRecord { step, recon_l1: g.value(vars.recon_l1).data()[0] as f64, kl: g.value(vars.kl).data()[0] as f64, total: g.value(vars.total).data()[0] as f64 };
        on_step(model, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Model initialized from the stream keyed by `(seed, 0, VAE_INIT)`.
pub fn init_vae(config: VaeConfig, seed: u64) -> Result<VaeModel<f32>> {
    VaeModel::new(config, &mut keyed(seed, 0, field::VAE_INIT))
}
