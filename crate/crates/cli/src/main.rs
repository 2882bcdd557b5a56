use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neurocontrol_cli::{commands, CliError, Overrides, RunConfig};

/// Optimal and learned feedback control of a pathological Hodgkin-Huxley neuron.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Zero-control rollouts of the normal and pathological neuron.
    Simulate(Common),
    /// Open-loop baseline solve.
    Solve(Common),
    /// Train the value network.
    Train(WithCheckpoint),
    /// Compare feedback and open-loop objectives over initial voltages.
    Sweep(WithCheckpoint),
    /// Feedback rollouts with and without a state shock.
    Shock(WithCheckpoint),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration. Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Value-network checkpoint. For `train` this is where the final
    /// checkpoint is written; otherwise it is read. Defaults to
    /// `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let raw = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    raw.resolve(&Overrides {
        output_dir: common.out.clone(),
        seed: common.seed,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => commands::simulate(&resolve(&c)?),
        Command::Solve(c) => commands::solve(&resolve(&c)?),
        Command::Train(c) => commands::train(&resolve(&c.common)?, c.checkpoint.as_deref()),
        Command::Sweep(c) => {
            let cfg = resolve(&c.common)?;
            let ckpt = c.checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
            commands::sweep(&cfg, &ckpt)
        }
        Command::Shock(c) => {
            let cfg = resolve(&c.common)?;
            let ckpt = c.checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
            commands::shock(&cfg, &ckpt)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
