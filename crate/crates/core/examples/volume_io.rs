//! Writes a phantom as header + raw, reads it back, and exports PGM previews.
//!
//! cargo run --release --example volume_io -- /tmp/scope-io

use std::path::PathBuf;

use scope_core::phantom::{generate_subject, PhantomConfig};
use scope_core::volume_io::{export_preview, read_float_volume, write_volume, Plane};

fn main() -> scope_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scope-io".into()));
    let (vol, labels) = generate_subject(&PhantomConfig::default(), 0)?;
    write_volume(&vol, &dir.join("subject.mhd"))?;
    write_volume(&labels, &dir.join("subject_labels.mhd"))?;
    let back = read_float_volume(&dir.join("subject.mhd"))?;
    assert_eq!(back, vol);
    println!("{}", std::fs::read_to_string(dir.join("subject.mhd")).unwrap());
    let mid = vol.n_slices() / 2;
    export_preview(&vol, &dir.join("axial.pgm"), Plane::Axial, mid, (-400.0, 400.0))?;
    export_preview(&vol, &dir.join("coronal.pgm"), Plane::Coronal, vol.dims()[1] / 2, (-400.0, 400.0))?;
    println!("previews in {}", dir.display());
    Ok(())
}
