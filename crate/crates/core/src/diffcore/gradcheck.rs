//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Gradient magnitudes below this are compared absolutely: the relative error
/// denominator is `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gradcheck (tol {:e}): {}", self.tolerance, if self.passed() { "pass" } else { "FAIL" })?;
        for e in &self.entries {
            writeln!(f, "  {:<40} n={:<6} rel={:.3e} abs={:.3e}", e.name, e.elements, e.max_rel_error, e.max_abs_error)?;
        }
        Ok(())
    }
}

/// Fixed weights used to reduce a non-scalar output to a scalar.
fn probe_weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let x = (i as f64 * 0.618_033_988_75 + 0.1).fract();
        2.0 * x - 1.0
    })
}

fn scalar_loss<N>(net: &N, ps: &ParamSet<f64>, inputs: &[Tensor<f64>], record: bool) -> Result<(Graph<f64>, Var, Vec<Var>)>
where
    N: Fn(&mut Graph<f64>, &ParamSet<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| if record { g.input_with_grad(t.clone()) } else { g.input(t.clone()) }).collect::<Result<Vec<_>>>()?;
    let out = net(&mut g, ps, &vars)?;
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let w = probe_weights(g.value(out).shape());
        g.weighted_sum(out, &w)?
    };
    Ok((g, loss, vars))
}

fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> GradcheckEntry {
    let mut rel: f64 = 0.0;
    let mut abs: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let d = (a - n).abs();
        abs = abs.max(d);
        rel = rel.max(d / a.abs().max(n.abs()).max(REL_ERROR_FLOOR));
    }
    GradcheckEntry { name, elements: analytic.len(), max_rel_error: rel, max_abs_error: abs }
}

/// Compares analytic gradients of `net` (reduced to a scalar with fixed probe
/// weights when its output is not already scalar) against central
/// differences, for every parameter tensor and every input tensor.
pub fn gradcheck<N>(net: N, params: &ParamSet<f64>, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradcheckReport>
where
    N: Fn(&mut Graph<f64>, &ParamSet<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, loss, vars) = scalar_loss(&net, params, inputs, true)?;
    g.backward(loss)?;
    let mut ps = params.clone();
    ps.zero_grad();
    g.accumulate_param_grads(&mut ps)?;

    let eval = |ps: &ParamSet<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let (g, loss, _) = scalar_loss(&net, ps, inputs, false)?;
        Ok(g.value(loss).data()[0])
    };

    let mut entries = Vec::new();
    let names: Vec<String> = ps.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let id = ps.id(&name).expect("name from set");
        let analytic = ps.get(id).grad.data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = params.clone();
        for i in 0..analytic.len() {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe, inputs)?;
            probe.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe, inputs)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        entries.push(compare(name, &analytic, &numeric));
    }

    for (k, var) in vars.iter().enumerate() {
        let analytic = match g.grad(*var) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for i in 0..analytic.len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(params, &probe)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(params, &probe)?;
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        entries.push(compare(format!("input[{k}]"), &analytic, &numeric));
    }

    Ok(GradcheckReport { entries, tolerance })
}
