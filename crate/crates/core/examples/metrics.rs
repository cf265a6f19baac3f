//! SSIM, PSNR and organ-volume disagreement between two phantom subjects, and
//! the copy-last-slice baseline on a held-out volume.

use scope_core::metrics::{eval_extension, psnr, ssim, volume_disagreement, ImputedSlices, IntensitySegmenter, SsimParams};
use scope_core::phantom::{generate_subject, PhantomConfig};
use scope_core::preprocess::preprocess_volume;

fn main() -> scope_core::Result<()> {
    let cfg = PhantomConfig::default();
    let a = preprocess_volume(&generate_subject(&cfg, 0)?.0, 1.0)?;
    let b = preprocess_volume(&generate_subject(&cfg, 1)?.0, 1.0)?;
    let [nx, ny, _] = a.dims();
    let p = SsimParams::default();
    let k = a.n_slices() / 2;
    println!("subject 0 vs 1, slice {k}: ssim {:.4}, psnr {}", ssim(a.slice(k), b.slice(k), nx, ny, &p)?, psnr(a.slice(k), b.slice(k), p.range)?);

    let seg = IntensitySegmenter::from_organs(&cfg.organs, cfg.air_hu, cfg.body_hu);
    let (la, lb) = (seg.segment(&a), seg.segment(&b));
    for o in &cfg.organs {
        println!("  {:<14} disagreement {:.1}%", o.name, volume_disagreement(&la, &lb, o.id)?);
    }

    // Copy-last baseline: pretend slices 40..46 were imputed as slice 39.
    let imputed = ImputedSlices { indices: (40..46).collect(), baseline_source: 39 };
    let ids: Vec<i32> = cfg.organs.iter().map(|o| o.id).collect();
    let r = eval_extension(&a, &a, &la, &la, &imputed, &ids, &p)?;
    println!("copy-last baseline over 6 slices: ssim {:.4} ± {:.4}, psnr {}", r.baseline_ssim.mean, r.baseline_ssim.std, r.baseline_psnr);
    Ok(())
}
