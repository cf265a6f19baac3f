//! Renders one phantom subject and prints per-organ z-extents and voxel counts.
//!
//! cargo run --release --example phantom -- [subject_index]

use scope_core::phantom::{generate_subject, organ_extents, PhantomConfig};

fn main() -> scope_core::Result<()> {
    let idx: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = PhantomConfig::default();
    let (vol, labels) = generate_subject(&cfg, idx)?;
    let [nx, ny, ns] = vol.dims();
    println!("subject {idx}: {nx}x{ny}x{ns}, spacing {:?} mm", vol.spacing());
    for e in organ_extents(&cfg, idx)? {
        let name = cfg.organs.iter().find(|o| o.id == e.organ_id).map_or("?", |o| o.name.as_str());
        let voxels = labels.data().iter().filter(|&&l| l == e.organ_id).count();
        println!("  {:>2} {name:<14} z [{:6.1}, {:6.1}] mm  {voxels} voxels", e.organ_id, e.z_lo, e.z_hi);
    }
    let (lo, hi) = vol.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("  HU range [{lo:.0}, {hi:.0}]");
    Ok(())
}
