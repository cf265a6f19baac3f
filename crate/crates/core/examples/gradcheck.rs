//! Builds a small conv net on the autodiff tape and checks its gradients
//! against central finite differences.

use rand::Rng;
use scope_core::diffcore::{gradcheck, Graph, LayerSpec, ParamSet, Sequential, Tensor, Var};
use scope_core::rng::keyed;

fn main() -> scope_core::Result<()> {
    let mut rng = keyed(0, 0, 0);
    let mut ps = ParamSet::<f64>::new();
    let net = Sequential::build(
        "net",
        &[
            LayerSpec::Conv2d { in_ch: 1, out_ch: 4, kernel: 3, stride: 2, pad: 1 },
            LayerSpec::GroupNorm { channels: 4, groups: 2 },
            LayerSpec::Silu,
            LayerSpec::ConvTranspose2d { in_ch: 4, out_ch: 1, kernel: 4, stride: 2, pad: 1 },
        ],
        &mut ps,
        &mut rng,
    )?;
    let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
    let report = gradcheck(|g: &mut Graph<f64>, ps: &ParamSet<f64>, xs: &[Var]| net.forward(g, ps, xs[0], None), &ps, &[x], 1e-4)?;
    println!("{report}");
    Ok(())
}
