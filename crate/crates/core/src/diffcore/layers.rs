//! The layer inventory the VAE and denoiser are assembled from.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    Linear,
    GroupNorm,
    Silu,
    NearestUpsample,
    AvgDownsample,
    TimeEmbedding,
    ResidualBlock,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Conv2d,
        LayerKind::ConvTranspose2d,
        LayerKind::Linear,
        LayerKind::GroupNorm,
        LayerKind::Silu,
        LayerKind::NearestUpsample,
        LayerKind::AvgDownsample,
        LayerKind::TimeEmbedding,
        LayerKind::ResidualBlock,
    ];
}

/// Hyperparameters per layer kind.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    ConvTranspose2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Linear { in_features: usize, out_features: usize },
    GroupNorm { channels: usize, groups: usize },
    Silu,
    NearestUpsample,
    AvgDownsample,
    TimeEmbedding { dim: usize },
    ResidualBlock { in_ch: usize, out_ch: usize, groups: usize, emb_dim: Option<usize> },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::ConvTranspose2d { .. } => LayerKind::ConvTranspose2d,
            LayerSpec::Linear { .. } => LayerKind::Linear,
            LayerSpec::GroupNorm { .. } => LayerKind::GroupNorm,
            LayerSpec::Silu => LayerKind::Silu,
            LayerSpec::NearestUpsample => LayerKind::NearestUpsample,
            LayerSpec::AvgDownsample => LayerKind::AvgDownsample,
            LayerSpec::TimeEmbedding { .. } => LayerKind::TimeEmbedding,
            LayerSpec::ResidualBlock { .. } => LayerKind::ResidualBlock,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, .. } | LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, .. } => {
                in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0
            }
            LayerSpec::Linear { in_features, out_features } => in_features > 0 && out_features > 0,
            LayerSpec::GroupNorm { channels, groups } => groups > 0 && channels % groups == 0,
            LayerSpec::TimeEmbedding { dim } => dim >= 2 && dim % 2 == 0,
            LayerSpec::ResidualBlock { in_ch, out_ch, groups, .. } => groups > 0 && in_ch % groups == 0 && out_ch % groups == 0,
            LayerSpec::Silu | LayerSpec::NearestUpsample | LayerSpec::AvgDownsample => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer spec {self:?}")))
        }
    }
}

/// A built layer: its spec plus the parameter ids it owns.
#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    params: Vec<ParamId>,
    children: Vec<Layer>,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl Layer {
    /// Registers the layer's parameters in `ps` under `name.*`.
    pub fn build<F: Scalar>(name: &str, spec: LayerSpec, ps: &mut ParamSet<F>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut children = Vec::new();
        match spec {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                params.push(ps.add_normal(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], he_std(in_ch * kernel * kernel), rng)?);
                params.push(ps.add_const(format!("{name}.bias"), &[out_ch], 0.0)?);
            }
            LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, .. } => {
                let fan = in_ch * kernel * kernel / (stride * stride).max(1);
                params.push(ps.add_normal(format!("{name}.weight"), &[in_ch, out_ch, kernel, kernel], he_std(fan.max(1)), rng)?);
                params.push(ps.add_const(format!("{name}.bias"), &[out_ch], 0.0)?);
            }
            LayerSpec::Linear { in_features, out_features } => {
                params.push(ps.add_normal(format!("{name}.weight"), &[out_features, in_features], he_std(in_features), rng)?);
                params.push(ps.add_const(format!("{name}.bias"), &[out_features], 0.0)?);
            }
            LayerSpec::GroupNorm { channels, .. } => {
                params.push(ps.add_const(format!("{name}.gamma"), &[channels], 1.0)?);
                params.push(ps.add_const(format!("{name}.beta"), &[channels], 0.0)?);
            }
            LayerSpec::Silu | LayerSpec::NearestUpsample | LayerSpec::AvgDownsample | LayerSpec::TimeEmbedding { .. } => {}
            LayerSpec::ResidualBlock { in_ch, out_ch, groups, emb_dim } => {
                children.push(Layer::build(&format!("{name}.norm1"), LayerSpec::GroupNorm { channels: in_ch, groups }, ps, rng)?);
                children.push(Layer::build(&format!("{name}.conv1"), LayerSpec::Conv2d { in_ch, out_ch, kernel: 3, stride: 1, pad: 1 }, ps, rng)?);
                children.push(Layer::build(&format!("{name}.norm2"), LayerSpec::GroupNorm { channels: out_ch, groups }, ps, rng)?);
                children.push(Layer::build(&format!("{name}.conv2"), LayerSpec::Conv2d { in_ch: out_ch, out_ch, kernel: 3, stride: 1, pad: 1 }, ps, rng)?);
                if in_ch != out_ch {
                    children.push(Layer::build(&format!("{name}.skip"), LayerSpec::Conv2d { in_ch, out_ch, kernel: 1, stride: 1, pad: 0 }, ps, rng)?);
                }
                if let Some(e) = emb_dim {
                    children.push(Layer::build(&format!("{name}.emb"), LayerSpec::Linear { in_features: e, out_features: out_ch }, ps, rng)?);
                }
            }
        }
        Ok(Self { name: name.to_string(), spec, params, children })
    }

    fn child(&self, suffix: &str) -> Option<&Layer> {
        self.children.iter().find(|c| c.name.ends_with(suffix))
    }

    /// Applies the layer. `emb` is the conditioning vector for residual blocks
    /// built with an embedding input; other layers ignore it.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var, emb: Option<Var>) -> Result<Var> {
        g.set_scope(self.name.clone());
        match self.spec {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let (w, b) = (g.param(ps, self.params[0])?, g.param(ps, self.params[1])?);
                g.conv2d(x, w, b, stride, pad)
            }
            LayerSpec::ConvTranspose2d { stride, pad, .. } => {
                let (w, b) = (g.param(ps, self.params[0])?, g.param(ps, self.params[1])?);
                g.conv_transpose2d(x, w, b, stride, pad)
            }
            LayerSpec::Linear { .. } => {
                let (w, b) = (g.param(ps, self.params[0])?, g.param(ps, self.params[1])?);
                g.linear(x, w, b)
            }
            LayerSpec::GroupNorm { groups, .. } => {
                let (gm, bt) = (g.param(ps, self.params[0])?, g.param(ps, self.params[1])?);
                g.group_norm(x, gm, bt, groups)
            }
            LayerSpec::Silu => g.silu(x),
            LayerSpec::NearestUpsample => g.upsample_nearest2(x),
            LayerSpec::AvgDownsample => g.avg_pool2(x),
            LayerSpec::TimeEmbedding { dim } => g.time_embedding(x, dim),
            LayerSpec::ResidualBlock { .. } => {
                let mut h = self.children[0].forward(g, ps, x, None)?;
                g.set_scope(self.name.clone());
                h = g.silu(h)?;
                h = self.children[1].forward(g, ps, h, None)?;
                if let Some(proj) = self.child(".emb") {
                    let e = emb.ok_or_else(|| Error::Shape(format!("{}: missing embedding input", self.name)))?;
                    let e = proj.forward(g, ps, e, None)?;
                    h = g.add_channel_bias(h, e)?;
                }
                h = self.children[2].forward(g, ps, h, None)?;
                g.set_scope(self.name.clone());
                h = g.silu(h)?;
                h = self.children[3].forward(g, ps, h, None)?;
                let skip = match self.child(".skip") {
                    Some(s) => s.forward(g, ps, x, None)?,
                    None => x,
                };
                g.set_scope(self.name.clone());
                g.add(h, skip)
            }
        }
    }
}

/// A plain chain of layers (handy for tests and small probes).
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn build<F: Scalar>(prefix: &str, specs: &[LayerSpec], ps: &mut ParamSet<F>, rng: &mut impl Rng) -> Result<Self> {
        let layers = specs.iter().enumerate().map(|(i, s)| Layer::build(&format!("{prefix}.{i}"), s.clone(), ps, rng)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, mut x: Var, emb: Option<Var>) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(g, ps, x, emb)?;
        }
        Ok(x)
    }
}
