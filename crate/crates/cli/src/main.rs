use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coldrec::pipeline::{generate_synthetic_dataset, run_stage, PipelineConfig, SyntheticSpec};

/// Cold-start music recommendation pipeline.
#[derive(Debug, Parser)]
#[command(name = "coldrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one pipeline stage, or `all`.
    Run {
        stage: String,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic corpus and its pipeline config.
    Synth {
        /// Generator spec file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the stages in run order.
    Stages,
}

fn run(cmd: Command) -> coldrec::Result<()> {
    match cmd {
        Command::Run { stage, config, out, seed } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            run_stage(&cfg, &stage)
        }
        Command::Synth { spec, out, seed } => {
            let mut s = match spec {
                Some(p) => SyntheticSpec::load(p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let path = generate_synthetic_dataset(&s, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Stages => {
            for s in coldrec::pipeline::STAGES {
                println!("{}", s.name);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
