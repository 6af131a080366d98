use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cider::config::PipelineConfig;
use cider::pipeline::{self, render_properties, PipelineError};
use cider::retention::RetentionConfig;

#[derive(Parser)]
#[command(
    name = "cider",
    version,
    about = "Synthesize, reselect and pack GUI world-knowledge corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize textual samples from trajectories
    Synth(Common),
    /// Score samples and draw the retained subset
    Select(Common),
    /// Pack the retained subset into a training stream
    Pack(Common),
    /// synth, select and pack in one go
    Run(Common),
    /// Print the consolidated report of a run directory
    Report(Common),
    /// Check the retention function's properties for a parameter set
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

impl Overrides {
    fn apply(&self, r: &mut RetentionConfig) {
        if let Some(v) = self.seed {
            r.seed = v;
        }
        if let Some(v) = self.alpha {
            r.alpha = v;
        }
        if let Some(v) = self.lambda {
            r.lambda = v;
        }
        if let Some(v) = self.gamma {
            r.gamma = v;
        }
        if let Some(v) = self.k {
            r.k = v;
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
    /// Shard the packed corpus at this many bytes
    #[arg(long)]
    shard_bytes: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct VerifyArgs {
    /// Take parameters from this config; defaults otherwise
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn load(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&common.config)
        .map_err(|e| PipelineError::Validation(e.to_string()))?;
    if let Some(dir) = &common.run_dir {
        cfg.paths.run_dir = dir.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(b) = common.shard_bytes {
        cfg.pack.shard_bytes = Some(b);
    }
    common.overrides.apply(&mut cfg.retention);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(c) => pipeline::cmd_synth(&load(&c)?),
        Command::Select(c) => pipeline::cmd_select(&load(&c)?),
        Command::Pack(c) => pipeline::cmd_pack(&load(&c)?),
        Command::Run(c) => pipeline::cmd_run(&load(&c)?),
        Command::Report(c) => {
            print!("{}", pipeline::cmd_report(&load(&c)?)?.render());
            Ok(())
        }
        Command::Verify(v) => {
            let mut retention = match &v.config {
                Some(path) => {
                    PipelineConfig::load(path)
                        .map_err(|e| PipelineError::Validation(e.to_string()))?
                        .retention
                }
                None => RetentionConfig::default(),
            };
            v.overrides.apply(&mut retention);
            let summary = pipeline::cmd_verify(&retention)?;
            print!("{}", render_properties(&summary));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cider: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
