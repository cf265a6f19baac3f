//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Reductions always run in index order, so a
//! fixed input produces bitwise-identical gradients.

use super::conv::{col2im, im2col, ConvGeom};
use super::params::{ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// User-defined differentiable op, mainly for test fixtures.
pub trait CustomOp<F: Scalar> {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>>;
    /// Gradient with respect to each input, in order.
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &Tensor<F>) -> Vec<Tensor<F>>;
}

enum Op<F: Scalar> {
    Leaf,
    Param { set: u64, id: ParamId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Silu(Var),
    Tanh(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<F> },
    ConvT2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<F>, inv_std: Vec<F> },
    Upsample2(Var),
    AvgPool2(Var),
    AddChannelBias { x: Var, bias: Var },
    ConcatChannels(Var, Var),
    SliceCols { x: Var, start: usize },
    TimeEmbed { t: Var },
    MeanAbsDiff { x: Var, target: Tensor<F> },
    MeanSqDiff { x: Var, target: Tensor<F> },
    KlStdNormal { mu: Var, logvar: Var },
    WeightedSum { x: Var, weights: Tensor<F> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F>> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// The recording tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    scope: String,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::Shape(format!("{what}: expected NCHW, got {s:?}"))),
    }
}

fn dims2(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::Shape(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), scope: String::from("graph") }
    }

    /// Names the layer that subsequent ops belong to (used in numeric errors).
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("{}/{what}", self.scope), "non-finite forward value"));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param { .. } => true,
            op => op_inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// Input that collects a gradient during backward.
    pub fn input_with_grad(&mut self, t: Tensor<F>) -> Result<Var> {
        let v = self.push(t, Op::Leaf, "input")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Binds a parameter into the graph.
    pub fn param(&mut self, set: &ParamSet<F>, id: ParamId) -> Result<Var> {
        let value = set.get(id).value.clone();
        self.push(value, Op::Param { set: set.uid(), id }, "param")
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).same_shape(self.value(b)).map_err(|e| Error::Shape(format!("{}/{what}: {e}", self.scope)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::of(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let one = F::one();
        let v = self.value(a).map(|x| x / (one + (-x).exp()));
        self.push(v, Op::Silu(a), "silu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    /// `x·Wᵀ + b` with x `[N, in]`, W `[out, in]`, b `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, fin] = dims2(self.value(x), "linear input")?;
        let [fout, fin_w] = dims2(self.value(w), "linear weight")?;
        if fin != fin_w || self.value(b).shape() != [fout] {
            return Err(Error::Shape(format!("{}/linear: x {:?}, w {:?}, b {:?}", self.scope, self.value(x).shape(), self.value(w).shape(), self.value(b).shape())));
        }
        let mut out = vec![F::zero(); n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        F::gemm(n, fin, fout, F::one(), self.value(x).data(), fin as isize, 1, self.value(w).data(), 1, fin as isize, F::one(), &mut out, fout as isize, 1);
        let v = Tensor::new(&[n, fout], out)?;
        self.push(v, Op::Linear { x, w, b }, "linear")
    }

    /// Cross-correlation with x `[N, Ci, H, W]`, w `[Co, Ci, k, k]`, b `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = dims4(self.value(x), "conv2d input")?;
        let [co, ci_w, k, k2] = dims4(self.value(w), "conv2d weight")?;
        let geom = ConvGeom { channels: ci, height: h, width: wd, kernel: k, stride, pad };
        let out_hw = geom.out_hw();
        if ci != ci_w || k != k2 || self.value(b).shape() != [co] || out_hw.is_none() {
            return Err(Error::Shape(format!("{}/conv2d: x {:?}, w {:?}, stride {stride}, pad {pad}", self.scope, self.value(x).shape(), self.value(w).shape())));
        }
        let (ho, wo) = out_hw.unwrap();
        let p = ho * wo;
        let kk = geom.col_rows();
        let mut cols = vec![F::zero(); n * kk * p];
        let mut out = vec![F::zero(); n * co * p];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        for s in 0..n {
            let col = &mut cols[s * kk * p..(s + 1) * kk * p];
            im2col(&xs[s * ci * h * wd..(s + 1) * ci * h * wd], &geom, col);
            let o = &mut out[s * co * p..(s + 1) * co * p];
            for (c, plane) in o.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = bs[c]);
            }
            F::gemm(co, kk, p, F::one(), ws, kk as isize, 1, col, p as isize, 1, F::one(), o, p as isize, 1);
        }
        let v = Tensor::new(&[n, co, ho, wo], out)?;
        self.push(v, Op::Conv2d { x, w, b, geom, cols }, "conv2d")
    }

    /// Transposed convolution with x `[N, Ci, H, W]`, w `[Ci, Co, k, k]`, b `[Co]`.
    /// Output side is `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, hi, wi] = dims4(self.value(x), "conv_transpose2d input")?;
        let [ci_w, co, k, k2] = dims4(self.value(w), "conv_transpose2d weight")?;
        let bad = || Error::Shape(format!("{}/conv_transpose2d: x {:?}, w {:?}", self.scope, self.value(x).shape(), self.value(w).shape()));
        if ci != ci_w || k != k2 || self.value(b).shape() != [co] || stride == 0 {
            return Err(bad());
        }
        let ho = ((hi - 1) * stride + k).checked_sub(2 * pad).ok_or_else(bad)?;
        let wo = ((wi - 1) * stride + k).checked_sub(2 * pad).ok_or_else(bad)?;
        let geom = ConvGeom { channels: co, height: ho, width: wo, kernel: k, stride, pad };
        if geom.out_hw() != Some((hi, wi)) {
            return Err(bad());
        }
        let pi = hi * wi;
        let kc = geom.col_rows();
        let mut cols = vec![F::zero(); kc * pi];
        let mut out = vec![F::zero(); n * co * ho * wo];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        for s in 0..n {
            F::gemm(kc, ci, pi, F::one(), ws, 1, kc as isize, &xs[s * ci * pi..(s + 1) * ci * pi], pi as isize, 1, F::zero(), &mut cols, pi as isize, 1);
            let o = &mut out[s * co * ho * wo..(s + 1) * co * ho * wo];
            for (c, plane) in o.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v = bs[c]);
            }
            col2im(&cols, &geom, o);
        }
        let v = Tensor::new(&[n, co, ho, wo], out)?;
        self.push(v, Op::ConvT2d { x, w, b, geom }, "conv_transpose2d")
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 || self.value(gamma).shape() != [shape[1]] || self.value(beta).shape() != [shape[1]] {
            return Err(Error::Shape(format!("{}/group_norm: x {shape:?}, groups {groups}", self.scope)));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let cg = c / groups;
        let m = cg * spatial;
        let eps = F::of(1e-5);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![F::zero(); xs.len()];
        let mut inv_std = vec![F::zero(); n * groups];
        let mut out = vec![F::zero(); xs.len()];
        let mf = F::of(m as f64);
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * spatial;
                let seg = &xs[off..off + m];
                let mean = seg.iter().copied().fold(F::zero(), |a, b| a + b) / mf;
                let var = seg.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / mf;
                let is = F::one() / (var + eps).sqrt();
                inv_std[s * groups + g] = is;
                for j in 0..m {
                    let ch = g * cg + j / spatial;
                    let xh = (seg[j] - mean) * is;
                    xhat[off + j] = xh;
                    out[off + j] = gs[ch] * xh + bs[ch];
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, "group_norm")
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "upsample")?;
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[plane * 4 * h * w + y * 2 * w + xx] = xs[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        self.push(v, Op::Upsample2(x), "upsample")
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "avg_pool")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("{}/avg_pool: odd spatial dims {h}x{w}", self.scope)));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let q = F::of(0.25);
        let mut out = vec![F::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xs[plane * h * w..];
            for y in 0..ho {
                for xx in 0..wo {
                    let a = src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1];
                    let b = src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[plane * ho * wo + y * wo + xx] = (a + b) * q;
                }
            }
        }
        let v = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(v, Op::AvgPool2(x), "avg_pool")
    }

    /// Adds `bias[n, c]` to every spatial position of channel `c` in sample `n`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "add_channel_bias")?;
        if self.value(bias).shape() != [n, c] {
            return Err(Error::Shape(format!("{}/add_channel_bias: bias {:?} for x {:?}", self.scope, self.value(bias).shape(), self.value(x).shape())));
        }
        let bs = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v + bs[i]);
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        self.push(v, Op::AddChannelBias { x, bias }, "add_channel_bias")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.value(a), "concat")?;
        let [nb, cb, hb, wb] = dims4(self.value(b), "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!("{}/concat: {:?} vs {:?}", self.scope, self.value(a).shape(), self.value(b).shape())));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * sa..(s + 1) * sa]);
            out.extend_from_slice(&self.value(b).data()[s * sb..(s + 1) * sb]);
        }
        let v = Tensor::new(&[n, ca + cb, h, w], out)?;
        self.push(v, Op::ConcatChannels(a, b), "concat")
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, m] = dims2(self.value(x), "slice_cols")?;
        if start + len > m {
            return Err(Error::Shape(format!("{}/slice_cols: {start}+{len} > {m}", self.scope)));
        }
        let xs = self.value(x).data();
        let out: Vec<F> = (0..n).flat_map(|r| xs[r * m + start..r * m + start + len].iter().copied()).collect();
        let v = Tensor::new(&[n, len], out)?;
        self.push(v, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Sinusoidal embedding of per-sample times `t` (`[N]`) into `[N, dim]`:
    /// first half `sin(t·ωᵢ)`, second half `cos(t·ωᵢ)`, `ωᵢ = 10000^(−i/half)`.
    pub fn time_embedding(&mut self, t: Var, dim: usize) -> Result<Var> {
        if dim < 2 || dim % 2 != 0 || self.value(t).shape().len() != 1 {
            return Err(Error::Shape(format!("{}/time_embedding: t {:?}, dim {dim}", self.scope, self.value(t).shape())));
        }
        let half = dim / 2;
        let ts = self.value(t).data();
        let mut out = vec![F::zero(); ts.len() * dim];
        for (s, &tv) in ts.iter().enumerate() {
            for i in 0..half {
                let a = tv * time_freq::<F>(i, half);
                out[s * dim + i] = a.sin();
                out[s * dim + half + i] = a.cos();
            }
        }
        let v = Tensor::new(&[ts.len(), dim], out)?;
        self.push(v, Op::TimeEmbed { t }, "time_embedding")
    }

    /// Mean absolute deviation from a constant target (scalar output).
    pub fn mean_abs_diff(&mut self, x: Var, target: &Tensor<F>) -> Result<Var> {
        self.value(x).same_shape(target)?;
        let s = self.value(x).data().iter().zip(target.data()).fold(F::zero(), |a, (&p, &q)| a + (p - q).abs());
        let v = Tensor::scalar(s / F::of(target.len() as f64));
        self.push(v, Op::MeanAbsDiff { x, target: target.clone() }, "mean_abs_diff")
    }

    /// Mean squared deviation from a constant target (scalar output).
    pub fn mean_sq_diff(&mut self, x: Var, target: &Tensor<F>) -> Result<Var> {
        self.value(x).same_shape(target)?;
        let s = self.value(x).data().iter().zip(target.data()).fold(F::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
        let v = Tensor::scalar(s / F::of(target.len() as f64));
        self.push(v, Op::MeanSqDiff { x, target: target.clone() }, "mean_sq_diff")
    }

    /// `0.5·Σ(μ² + e^{logvar} − 1 − logvar)` summed over dims, averaged over rows.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.binary_same(mu, logvar, "kl")?;
        let [n, _] = dims2(self.value(mu), "kl")?;
        let half = F::of(0.5);
        let s = self.value(mu).data().iter().zip(self.value(logvar).data()).fold(F::zero(), |a, (&m, &l)| a + half * (m * m + l.exp() - F::one() - l));
        let v = Tensor::scalar(s / F::of(n as f64));
        self.push(v, Op::KlStdNormal { mu, logvar }, "kl")
    }

    /// `Σ x ⊙ weights` (scalar output).
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<F>) -> Result<Var> {
        self.value(x).same_shape(weights)?;
        let s = self.value(x).data().iter().zip(weights.data()).fold(F::zero(), |a, (&p, &q)| a + p * q);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.clone() }, "weighted_sum")
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<F>>) -> Result<Var> {
        let values: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        let name = op.name().to_string();
        self.push(out, Op::Custom { inputs: inputs.to_vec(), op }, &name)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.value(loss).shape())));
        }
        self.backward_with(loss, Tensor::full(self.value(loss).shape(), F::one()))
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, grad: Tensor<F>) -> Result<()> {
        self.value(out).same_shape(&grad)?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(grad);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param { .. }) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            let contributions = self.node_backward(i, &gy)?;
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Adds every recorded gradient of parameters bound from `set` into its grad slots.
    pub fn accumulate_param_grads(&self, set: &mut ParamSet<F>) -> Result<()> {
        let uid = set.uid();
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param { set: s, id }, Some(g)) = (&node.op, grad) {
                if *s == uid {
                    set.get_mut(*id).grad.add_assign(g)?;
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gy: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let one = F::one();
        let out = match &node.op {
            Op::Leaf | Op::Param { .. } => vec![],
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, gy.map(|g| -g))],
            Op::Mul(a, b) => vec![(*a, gy.zip_map(self.value(*b), |g, v| g * v)?), (*b, gy.zip_map(self.value(*a), |g, v| g * v)?)],
            Op::Scale(a, c) => vec![(*a, gy.map(|g| g * *c))],
            Op::Exp(a) => vec![(*a, gy.zip_map(y, |g, v| g * v)?)],
            Op::Silu(a) => {
                let dx = gy.zip_map(self.value(*a), |g, x| {
                    let s = one / (one + (-x).exp());
                    g * s * (one + x * (one - s))
                })?;
                vec![(*a, dx)]
            }
            Op::Tanh(a) => vec![(*a, gy.zip_map(y, |g, v| g * (one - v * v))?)],
            Op::Reshape(a) => vec![(*a, gy.clone().reshape(self.value(*a).shape())?)],
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let [n, fin] = dims2(xv, "linear")?;
                let fout = y.shape()[1];
                let gd = gy.data();
                let mut res = Vec::new();
                if needs(x) {
                    let mut dx = vec![F::zero(); n * fin];
                    F::gemm(n, fout, fin, one, gd, fout as isize, 1, self.value(*w).data(), fin as isize, 1, F::zero(), &mut dx, fin as isize, 1);
                    res.push((*x, Tensor::new(&[n, fin], dx)?));
                }
                let mut dw = vec![F::zero(); fout * fin];
                F::gemm(fout, n, fin, one, gd, 1, fout as isize, xv.data(), fin as isize, 1, F::zero(), &mut dw, fin as isize, 1);
                res.push((*w, Tensor::new(&[fout, fin], dw)?));
                let mut db = vec![F::zero(); fout];
                for row in gd.chunks(fout) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                res.push((*b, Tensor::new(&[fout], db)?));
                res
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let [n, co, ho, wo] = dims4(y, "conv2d")?;
                let p = ho * wo;
                let kk = geom.col_rows();
                let in_len = geom.channels * geom.height * geom.width;
                let wv = self.value(*w).data();
                let gd = gy.data();
                let mut dw = vec![F::zero(); co * kk];
                let mut db = vec![F::zero(); co];
                let want_dx = needs(x);
                let mut dx = if want_dx { vec![F::zero(); n * in_len] } else { Vec::new() };
                let mut dcols = vec![F::zero(); kk * p];
                for s in 0..n {
                    let g = &gd[s * co * p..(s + 1) * co * p];
                    let col = &cols[s * kk * p..(s + 1) * kk * p];
                    F::gemm(co, p, kk, one, g, p as isize, 1, col, 1, p as isize, one, &mut dw, kk as isize, 1);
                    for (c, plane) in g.chunks(p).enumerate() {
                        db[c] = plane.iter().fold(db[c], |a, &v| a + v);
                    }
                    if want_dx {
                        F::gemm(kk, co, p, one, wv, 1, kk as isize, g, p as isize, 1, F::zero(), &mut dcols, p as isize, 1);
                        col2im(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                let mut res = vec![(*w, Tensor::new(self.value(*w).shape(), dw)?), (*b, Tensor::new(&[co], db)?)];
                if want_dx {
                    res.push((*x, Tensor::new(self.value(*x).shape(), dx)?));
                }
                res
            }
            Op::ConvT2d { x, w, b, geom } => {
                let [n, ci, hi, wi] = dims4(self.value(*x), "conv_transpose2d")?;
                let pi = hi * wi;
                let kc = geom.col_rows();
                let out_len = geom.channels * geom.height * geom.width;
                let xs = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = gy.data();
                let mut dw = vec![F::zero(); ci * kc];
                let mut db = vec![F::zero(); geom.channels];
                let want_dx = needs(x);
                let mut dx = if want_dx { vec![F::zero(); n * ci * pi] } else { Vec::new() };
                let mut dcols = vec![F::zero(); kc * pi];
                for s in 0..n {
                    let g = &gd[s * out_len..(s + 1) * out_len];
                    im2col(g, geom, &mut dcols);
                    F::gemm(ci, pi, kc, one, &xs[s * ci * pi..(s + 1) * ci * pi], pi as isize, 1, &dcols, 1, pi as isize, one, &mut dw, kc as isize, 1);
                    for (c, plane) in g.chunks(geom.height * geom.width).enumerate() {
                        db[c] = plane.iter().fold(db[c], |a, &v| a + v);
                    }
                    if want_dx {
                        F::gemm(ci, kc, pi, one, wv, kc as isize, 1, &dcols, pi as isize, 1, F::zero(), &mut dx[s * ci * pi..(s + 1) * ci * pi], pi as isize, 1);
                    }
                }
                let mut res = vec![(*w, Tensor::new(self.value(*w).shape(), dw)?), (*b, Tensor::new(&[geom.channels], db)?)];
                if want_dx {
                    res.push((*x, Tensor::new(self.value(*x).shape(), dx)?));
                }
                res
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let cg = c / groups;
                let m = cg * spatial;
                let mf = F::of(m as f64);
                let gs = self.value(*gamma).data();
                let gd = gy.data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = vec![F::zero(); gd.len()];
                for s in 0..n {
                    for g in 0..*groups {
                        let off = (s * c + g * cg) * spatial;
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for j in 0..m {
                            let ch = g * cg + j / spatial;
                            let d = gd[off + j] * gs[ch];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat[off + j];
                            dgamma[ch] = dgamma[ch] + gd[off + j] * xhat[off + j];
                            dbeta[ch] = dbeta[ch] + gd[off + j];
                        }
                        let mean_d = sum_d / mf;
                        let mean_dx = sum_dx / mf;
                        let is = inv_std[s * groups + g];
                        for j in 0..m {
                            let ch = g * cg + j / spatial;
                            let d = gd[off + j] * gs[ch];
                            dx[off + j] = is * (d - mean_d - xhat[off + j] * mean_dx);
                        }
                    }
                }
                vec![(*x, Tensor::new(shape, dx)?), (*gamma, Tensor::new(&[c], dgamma)?), (*beta, Tensor::new(&[c], dbeta)?)]
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = dims4(self.value(*x), "upsample")?;
                let gd = gy.data();
                let mut dx = vec![F::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut dx[plane * h * w + (yy / 2) * w + xx / 2];
                            *d = *d + gd[plane * 4 * h * w + yy * 2 * w + xx];
                        }
                    }
                }
                vec![(*x, Tensor::new(&[n, c, h, w], dx)?)]
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = dims4(self.value(*x), "avg_pool")?;
                let (ho, wo) = (h / 2, w / 2);
                let gd = gy.data();
                let q = F::of(0.25);
                let mut dx = vec![F::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[plane * h * w + yy * w + xx] = gd[plane * ho * wo + (yy / 2) * wo + xx / 2] * q;
                        }
                    }
                }
                vec![(*x, Tensor::new(&[n, c, h, w], dx)?)]
            }
            Op::AddChannelBias { x, bias } => {
                let [n, c, h, w] = dims4(y, "add_channel_bias")?;
                let db: Vec<F> = gy.data().chunks(h * w).map(|p| p.iter().fold(F::zero(), |a, &v| a + v)).collect();
                vec![(*x, gy.clone()), (*bias, Tensor::new(&[n, c], db)?)]
            }
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = dims4(self.value(*a), "concat")?;
                let cb = self.value(*b).shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let gd = gy.data();
                let mut da = Vec::with_capacity(n * sa);
                let mut dbv = Vec::with_capacity(n * sb);
                for s in 0..n {
                    let base = s * (sa + sb);
                    da.extend_from_slice(&gd[base..base + sa]);
                    dbv.extend_from_slice(&gd[base + sa..base + sa + sb]);
                }
                vec![(*a, Tensor::new(&[n, ca, h, w], da)?), (*b, Tensor::new(&[n, cb, h, w], dbv)?)]
            }
            Op::SliceCols { x, start } => {
                let [n, m] = dims2(self.value(*x), "slice_cols")?;
                let len = y.shape()[1];
                let mut dx = vec![F::zero(); n * m];
                for r in 0..n {
                    dx[r * m + start..r * m + start + len].copy_from_slice(&gy.data()[r * len..(r + 1) * len]);
                }
                vec![(*x, Tensor::new(&[n, m], dx)?)]
            }
            Op::TimeEmbed { t } => {
                let ts = self.value(*t).data();
                let dim = y.shape()[1];
                let half = dim / 2;
                let gd = gy.data();
                let dt: Vec<F> = ts
                    .iter()
                    .enumerate()
                    .map(|(s, &tv)| {
                        (0..half).fold(F::zero(), |acc, i| {
                            let f = time_freq::<F>(i, half);
                            let a = tv * f;
                            acc + gd[s * dim + i] * f * a.cos() - gd[s * dim + half + i] * f * a.sin()
                        })
                    })
                    .collect();
                vec![(*t, Tensor::new(&[ts.len()], dt)?)]
            }
            Op::MeanAbsDiff { x, target } => {
                let scale = gy.data()[0] / F::of(target.len() as f64);
                let dx = self.value(*x).zip_map(target, |p, q| {
                    let d = p - q;
                    if d > F::zero() {
                        scale
                    } else if d < F::zero() {
                        -scale
                    } else {
                        F::zero()
                    }
                })?;
                vec![(*x, dx)]
            }
            Op::MeanSqDiff { x, target } => {
                let scale = F::of(2.0) * gy.data()[0] / F::of(target.len() as f64);
                vec![(*x, self.value(*x).zip_map(target, |p, q| scale * (p - q))?)]
            }
            Op::KlStdNormal { mu, logvar } => {
                let n = self.value(*mu).shape()[0];
                let scale = gy.data()[0] / F::of(n as f64);
                let half = F::of(0.5);
                vec![(*mu, self.value(*mu).map(|m| scale * m)), (*logvar, self.value(*logvar).map(|l| scale * half * (l.exp() - one)))]
            }
            Op::WeightedSum { x, weights } => {
                let g = gy.data()[0];
                vec![(*x, weights.map(|w| w * g))]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, y, gy);
                if grads.len() != inputs.len() {
                    return Err(Error::Shape(format!("custom op {} returned {} grads for {} inputs", op.name(), grads.len(), inputs.len())));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

fn time_freq<F: Scalar>(i: usize, half: usize) -> F {
    F::of((-(10000f64.ln()) * i as f64 / half as f64).exp())
}

fn op_inputs<F: Scalar>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param { .. } => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Exp(a) | Op::Silu(a) | Op::Tanh(a) | Op::Reshape(a) | Op::Upsample2(a) | Op::AvgPool2(a) => vec![*a],
        Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => vec![*x, *w, *b],
        Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::AddChannelBias { x, bias } => vec![*x, *bias],
        Op::SliceCols { x, .. } | Op::MeanAbsDiff { x, .. } | Op::MeanSqDiff { x, .. } | Op::WeightedSum { x, .. } => vec![*x],
        Op::TimeEmbed { t } => vec![*t],
        Op::KlStdNormal { mu, logvar } => vec![*mu, *logvar],
        Op::Custom { inputs, .. } => inputs.clone(),
    }
}
