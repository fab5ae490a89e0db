//! `gnas`: command-line driver for genetic architecture search.

mod ablate;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use genetic_nas::config::{load_run_config, RunConfig, RunMode};

#[derive(Parser, Debug)]
#[command(name = "gnas", version, about = "Genetic neural-architecture search")]
struct Cli {
    /// Run configuration (TOML); omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `mode` when no subcommand is given.
    #[arg(long, global = true)]
    mode: Option<RunMode>,
    /// Overrides `out`, the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evolve cells on the shared-weight supernet (or a synthetic landscape).
    Search {
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Retrain one individual from scratch.
    FinalTrain {
        /// Individual JSON; defaults to `genome` from the config, then `<out>/best.json`.
        #[arg(long)]
        genome: Option<PathBuf>,
    },
    /// Sweep mutation probability and population size, writing CSVs.
    Ablate,
    /// Report the size of the search space.
    Enumerate,
    /// Draw an individual's three cells as Graphviz files.
    ExportDot {
        /// Individual JSON; defaults to `<out>/best.json`.
        #[arg(long)]
        genome: Option<PathBuf>,
    },
}

/// A failure caused by the configuration, as opposed to the run itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn is_config_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<genetic_nas::Error>()
                .is_some_and(genetic_nas::Error::is_config)
    })
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(config_error(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            load_run_config(path).with_context(|| format!("reading config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    let sub_mode = match &cli.command {
        Some(Command::Search { .. }) => Some(RunMode::Search),
        Some(Command::FinalTrain { .. }) => Some(RunMode::FinalTrain),
        Some(Command::Ablate) => Some(RunMode::Ablate),
        Some(Command::Enumerate) => Some(RunMode::Enumerate),
        Some(Command::ExportDot { .. }) | None => None,
    };
    match (sub_mode, cli.mode) {
        (Some(a), Some(b)) if a != b => {
            return Err(config_error(format!(
                "--mode {b} contradicts the {a} subcommand"
            )))
        }
        (Some(m), _) | (None, Some(m)) => config.mode = m,
        (None, None) => {}
    }
    if let Some(Command::FinalTrain { genome: Some(g) }) = &cli.command {
        config.genome = Some(g.clone());
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve_config(&cli)?;
    match cli.command {
        Some(Command::ExportDot { genome }) => commands::export_dot(&config, genome),
        Some(Command::Search { resume }) => commands::search(&config, resume),
        _ => match config.mode {
            RunMode::Search => commands::search(&config, false),
            RunMode::FinalTrain => commands::final_train(&config),
            RunMode::Ablate => ablate::ablate(&config),
            RunMode::Enumerate => commands::enumerate(&config),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config = is_config_failure(&e);
            eprintln!(
                "error{}: {e:#}",
                if config { " (configuration)" } else { "" }
            );
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
