use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod run_dir;
mod settings;

/// Exit status: 1 configuration, 2 evaluator, 3 internal contract violation.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("evaluator error: {0}")]
    Eval(String),
    #[error("internal error: {0}")]
    Contract(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Eval(_) => 2,
            CliError::Contract(_) => 3,
        }
    }
}

impl From<pnas::search::SearchError> for CliError {
    fn from(e: pnas::search::SearchError) -> Self {
        use pnas::search::SearchError as S;
        match e {
            S::Config(_) | S::Net(_) | S::Io(_) => CliError::Config(e.to_string()),
            S::Eval(_) => CliError::Eval(e.to_string()),
            S::Predictor(_) | S::Cell(_) | S::Stat(_) => CliError::Contract(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "pnas", version, about = "Progressive cell-based architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a progressive (or random) search and write a run directory.
    Search(SearchArgs),
    /// Compare predictors by rank correlation on sampled cells.
    Harness(HarnessArgs),
    /// Print the exact size of the cell space.
    Count {
        #[arg(short = 'B', long = "max-blocks", default_value_t = 5)]
        max_blocks: usize,
    },
    /// Build the network for one cell and report its cost.
    Build(BuildArgs),
    /// Re-run a finished run from its manifest into a new directory.
    Replay {
        /// Existing run directory containing manifest.json.
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Shared evaluator options.
#[derive(Args, Clone, Default)]
struct EvalArgs {
    /// synthetic, tabular (or tabular:PATH), external
    #[arg(long)]
    evaluator: Option<String>,
    /// Noise standard deviation of the synthetic oracle.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long = "oracle-seed")]
    oracle_seed: Option<String>,
    /// CSV with cell_key,seed,accuracy for the tabular evaluator.
    #[arg(long)]
    table: Option<String>,
    /// Worker command line for the external evaluator (split on whitespace).
    #[arg(long)]
    worker: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    retries: Option<String>,
}

#[derive(Args, Clone, Default)]
struct SearchArgs {
    /// key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<String>,
    /// pnas or random
    #[arg(long)]
    strategy: Option<String>,
    #[arg(short = 'B', long = "max-blocks")]
    max_blocks: Option<String>,
    #[arg(short = 'K', long)]
    beam: Option<String>,
    /// Number of cells for random search.
    #[arg(long)]
    count: Option<String>,
    #[arg(short = 'E', long)]
    epochs: Option<String>,
    #[arg(short = 'F', long)]
    filters: Option<String>,
    #[arg(short = 'N', long)]
    repeats: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(short = 'T', long)]
    trials: Option<String>,
    /// mlp, rnn, mlp-ens, rnn-ens or perfect
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long = "embed-dim")]
    embed_dim: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    /// selected or all
    #[arg(long = "log-predictions")]
    log_predictions: Option<String>,
    #[arg(long = "examples-per-model")]
    examples_per_model: Option<String>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args, Clone, Default)]
struct HarnessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated predictor names.
    #[arg(long)]
    predictors: Option<String>,
    /// Compare only the perfect predictor.
    #[arg(long)]
    perfect: bool,
    #[arg(short = 'T', long)]
    trials: Option<String>,
    #[arg(short = 'K', long = "sample-size")]
    sample_size: Option<String>,
    #[arg(short = 'R', long = "pool-size")]
    pool_size: Option<String>,
    #[arg(short = 'B', long = "max-blocks")]
    max_blocks: Option<String>,
    #[arg(short = 'E', long)]
    epochs: Option<String>,
    #[arg(short = 'F', long)]
    filters: Option<String>,
    #[arg(short = 'N', long)]
    repeats: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "embed-dim")]
    embed_dim: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct BuildArgs {
    /// Cell key, or `pnasnet-5`.
    #[arg(long)]
    cell: String,
    #[arg(short = 'N', long, default_value_t = 2)]
    repeats: usize,
    #[arg(short = 'F', long, default_value_t = 24)]
    filters: usize,
    /// Use the large-image plan (strided stem, 1000 classes).
    #[arg(long)]
    imagenet: bool,
    #[arg(long, default_value_t = 224)]
    hw: usize,
    /// Also write the graph JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
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
    let result = match cli.command {
        Command::Search(a) => commands::search(&a),
        Command::Harness(a) => commands::harness(&a),
        Command::Count { max_blocks } => commands::count(max_blocks),
        Command::Build(a) => commands::build(&a),
        Command::Replay { run, out } => commands::replay(&run, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pnas: {e}");
            ExitCode::from(e.code())
        }
    }
}
