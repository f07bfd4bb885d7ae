//! `taskblock`: generate data, train blocked and baseline models, attack
//! them, and report cost metrics.

mod commands;
mod config;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "taskblock", version, about = "Task blocking: train, attack and measure self-destructing models")]
struct Cli {
    /// Print the fully resolved configuration (defaults filled in) and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-task dataset as JSONL.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        baseline: Baseline,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step training log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the fine-tuning attack protocol against a checkpoint.
    Attack {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Companion `n,seed,best_accuracy` CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Comma-separated adaptation set sizes.
        #[arg(long, value_delimiter = ',')]
        n_grid: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Few-shot improvement of one attack report over a reference report.
    Report {
        /// Report for the model under test.
        #[arg(long)]
        model: PathBuf,
        /// Report for the random-initialization reference.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Meta-learned adversarial censoring.
    Mlac,
    /// Adversarial censoring (MLAC with no inner loop and no calibration).
    Ac,
    /// Extractor and desired head trained on the desired task only.
    Finetune,
    /// Untrained initialization.
    Random,
    /// Supervised training on both tasks; a pretrained starting point.
    Pretrain,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

/// A closed pipe (e.g. `| head`) is not an error worth a panic.
fn print_config(cfg: &RunConfig) {
    let _ = writeln!(std::io::stdout().lock(), "{}", cfg.to_pretty());
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &ConfigArg| -> Result<Option<RunConfig>, CliError> {
        let cfg = RunConfig::load(&c.config)?;
        if cli.print_config {
            print_config(&cfg);
            return Ok(None);
        }
        Ok(Some(cfg))
    };
    match cli.command {
        Command::GenData { ref config, ref out } => {
            if let Some(cfg) = load(config)? {
                commands::gen_data(&cfg, out)?;
            }
        }
        Command::Train { ref config, ref data, baseline, ref init, ref out, ref log } => {
            if let Some(cfg) = load(config)? {
                commands::train(&cfg, data, baseline, init.as_deref(), out, log.as_deref())?;
            }
        }
        Command::Attack { ref config, ref data, ref checkpoint, ref out, ref csv, ref n_grid, seeds, trials, jobs } => {
            let mut cfg = RunConfig::load(&config.config)?;
            if let Some(n) = n_grid {
                cfg.attack.n_grid = n.clone();
            }
            cfg.attack.seeds = seeds.unwrap_or(cfg.attack.seeds);
            cfg.attack.trials = trials.unwrap_or(cfg.attack.trials);
            cfg.validate()?;
            if cli.print_config {
                print_config(&cfg);
                return Ok(());
            }
            commands::attack(&cfg, data, checkpoint, out, csv.as_deref(), jobs)?;
        }
        Command::Report { ref model, ref reference, ref out } => {
            if cli.print_config {
                return Err(ConfigError::Invalid("report takes no configuration".into()).into());
            }
            commands::report(model, reference, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Run(err) => eprintln!("error: {err:#}"),
                CliError::Config(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
