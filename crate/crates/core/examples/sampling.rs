//! Ancestral sampling with an analytic noise predictor: for data drawn from
//! N(0, v) the sampler should return variance close to v.

use scope_core::diffusion::{cosine_schedule, sample, GaussianOracle, SigmaMode};
use scope_core::rng::keyed;

fn main() -> scope_core::Result<()> {
    let schedule = cosine_schedule(200)?;
    for v in [0.25, 1.0, 4.0] {
        let oracle = GaussianOracle { variance: v, schedule: schedule.clone() };
        let z = sample(&oracle, &[20_000, 1], &schedule, &mut keyed(1, 0, 0), SigmaMode::Posterior)?;
        let n = z.len() as f64;
        let mean = z.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = z.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        println!("target var {v:4}: sample mean {mean:+.3}, var {var:.3}");
    }
    Ok(())
}
