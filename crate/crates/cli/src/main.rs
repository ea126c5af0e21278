use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nowcast::{cmd_all, cmd_eval, cmd_prepare, cmd_synth, cmd_train, CliError, Context, ExperimentConfig};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Synthetic convective-storm nowcasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages even when their outputs are current or were produced by
    /// another configuration.
    #[arg(long, global = true)]
    force: bool,
    /// Directory that relative paths in the configuration resolve against.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Oversampling window shift in pixels.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    k: Option<u8>,
    /// Probability threshold for categorical scores.
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate synthetic events.
    Synth,
    /// Build train, validation and test sample sets.
    Prepare,
    /// Train the model.
    Train,
    /// Score the model and the persistence baseline on the test set.
    Eval,
    /// Run every stage in order.
    All,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NOWCAST_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("NOWCAST_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = cli.k {
        cfg.pipeline.k = k;
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    let ctx = Context::new(cfg, cli.out, cli.force);
    match cli.command {
        Command::Synth => cmd_synth(&ctx).map(drop),
        Command::Prepare => cmd_prepare(&ctx).map(drop),
        Command::Train => cmd_train(&ctx).map(drop),
        Command::Eval => cmd_eval(&ctx).map(drop),
        Command::All => cmd_all(&ctx).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
