//! Normalizes and downsamples a phantom, then draws a few training segments.

use scope_core::phantom::{generate_subject, PhantomConfig};
use scope_core::preprocess::{preprocess_volume, random_segment};
use scope_core::rng::keyed;

fn main() -> scope_core::Result<()> {
    let (vol, _) = generate_subject(&PhantomConfig::default(), 1)?;
    let norm = preprocess_volume(&vol, 1.0)?;
    println!("{:?} @ {:?} -> {:?} @ {:?}", vol.dims(), vol.spacing(), norm.dims(), norm.spacing());
    let mut rng = keyed(0, 0, 0);
    for _ in 0..4 {
        let seg = random_segment(&norm, 16, &mut rng)?;
        let mean = seg.slices.iter().flatten().map(|&v| v as f64).sum::<f64>() / (16 * seg.slices[0].len()) as f64;
        println!("segment at slice {:2}: mean {mean:+.3}", seg.start_index);
    }
    Ok(())
}
