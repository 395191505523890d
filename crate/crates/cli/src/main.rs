//! `traceng` command-line front end.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 numeric failure, 4 I/O error.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use traceng::influence::Method;

use crate::config::{ExperimentConfig, LayerScope, Overrides};
pub use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "traceng",
    version,
    about = "Training-data influence by tracing gradient descent"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints, trace and loss history.
    Train(Args),
    /// Score training examples against test examples.
    Influence(Args),
    /// Rank all training examples by self influence.
    SelfScan(Args),
    /// Inject mislabels, score with each method, write recovery and fix tables.
    MislabelEval(Args),
    /// Build a sketched gradient index over the training set.
    IndexBuild(Args),
    /// Query the index for proponents and opponents of test examples.
    IndexQuery(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Comma-separated test-set ids.
    #[arg(long, value_delimiter = ',')]
    test_ids: Option<Vec<u32>>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Weight every checkpoint by 1 instead of its step size.
    #[arg(long)]
    equal_weights: bool,
    /// TracIn gradient scope: `last` or `all`.
    #[arg(long, value_parser = parse_layer)]
    layer: Option<LayerScope>,
    #[arg(long)]
    sketch_d: Option<usize>,
    /// Drop training examples the final model misclassifies from rankings.
    #[arg(long)]
    filter_misclassified: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_str(s).map_err(|e| e.to_string())
}

fn parse_layer(s: &str) -> Result<LayerScope, String> {
    match s {
        "last" => Ok(LayerScope::Last),
        "all" => Ok(LayerScope::All),
        _ => Err(format!(
            "unknown layer scope `{s}`; expected `last` or `all`"
        )),
    }
}

impl Args {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = ExperimentConfig::load(&self.config)?;
        config.apply(&Overrides {
            out: self.out.clone(),
            seed: self.seed,
            method: self.method,
            test_ids: self.test_ids.clone(),
            top_k: self.top_k,
            equal_weights: self.equal_weights,
            layer: self.layer,
            sketch_d: self.sketch_d,
            filter_misclassified: self.filter_misclassified,
        })?;
        Ok(config)
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("TRACENG_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "TRACENG_THREADS must be a positive integer, got `{value}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))
}

type Runner = fn(&ExperimentConfig) -> Result<(), CliError>;

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (args, run): (&Args, Runner) = match &cli.command {
        Command::Train(a) => (a, commands::train),
        Command::Influence(a) => (a, commands::influence),
        Command::SelfScan(a) => (a, commands::self_scan),
        Command::MislabelEval(a) => (a, commands::mislabel_eval),
        Command::IndexBuild(a) => (a, commands::index_build),
        Command::IndexQuery(a) => (a, commands::index_query),
    };
    let config = args.resolve()?;
    std::fs::create_dir_all(&config.paths.out)?;
    run(&config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
