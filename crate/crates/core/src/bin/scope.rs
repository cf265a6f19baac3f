//! Thin command-line driver over `scope_core::pipeline`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use scope_core::config::RunConfig;
use scope_core::pipeline::{run, Command, THREADS_ENV};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    GenData,
    Preprocess,
    TrainVae,
    TrainLdm,
    Extend,
    Eval,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::Preprocess => Command::Preprocess,
            Cmd::TrainVae => Command::TrainVae,
            Cmd::TrainLdm => Command::TrainLdm,
            Cmd::Extend => Command::Extend,
            Cmd::Eval => Command::Eval,
            Cmd::Report => Command::Report,
        }
    }
}

/// Slice-latent diffusion FOV extension pipeline.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// INI run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[data] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `[io] out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace outputs that differ from a previous run.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = RunConfig::read(&args.config).and_then(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.data.seed = seed;
        }
        if let Some(out) = args.out {
            cfg.io.out = out;
        }
        let out = cfg.io.out.clone();
        run(args.command.into(), &cfg, &out, args.force, &mut |msg| eprintln!("{msg}"))
    });
    match result {
        Ok(record) => {
            eprintln!("{}: {} outputs in {} ms", record.command, record.outputs.len(), record.elapsed_ms);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
