//! Runs every pipeline stage with a shortened budget into a directory.
//!
//! cargo run --release --example pipeline -- /tmp/scope-run

use std::path::PathBuf;

use scope_core::config::RunConfig;
use scope_core::pipeline::run_all;

fn main() -> scope_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scope-run".into()));
    let mut cfg = RunConfig::default();
    cfg.data.n_heldout = 2;
    cfg.vae.steps = 200;
    cfg.ldm.steps = 100;
    cfg.ldm.diffusion_steps = 50;
    cfg.eval.cuts = vec![24, 40];
    for r in run_all(&cfg, &out, true, &mut |m| println!("{m}"))? {
        println!("{}: {} outputs, {} ms", r.command, r.outputs.len(), r.elapsed_ms);
    }
    println!("{}", std::fs::read_to_string(out.join("report/summary.txt")).unwrap_or_default());
    Ok(())
}
