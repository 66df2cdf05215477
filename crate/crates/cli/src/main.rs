//! `condist` command-line pipeline: filter mentions, mine positive pairs,
//! train a contrastive projection, build concept embeddings, and evaluate
//! them.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use condist::mining::Threshold;

/// Invalid flags, config keys, or config values. Exits with status 2; any
/// other error is a data error and exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const COMMANDS: &[&str] = &[
    "filter",
    "mine-neigh",
    "mine-cn",
    "train-proj",
    "project",
    "aggregate",
    "eval-clf",
    "eval-mention-clf",
    "eval-cluster",
    "neighbors",
    "anisotropy",
    "neighbor-shift",
];

#[derive(Debug, Parser)]
#[command(name = "condist", version, about, arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). 1 gives bit-identical reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with defaults; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop idiosyncratic mentions (all k nearest neighbours share the concept).
    Filter(FilterArgs),
    /// Mine positive pairs from neighbourhood structure.
    MineNeigh(MineNeighArgs),
    /// Mine property-grouped positive pairs from a concept-property table.
    MineCn(MineCnArgs),
    /// Train the contrastive projection.
    TrainProj(TrainProjArgs),
    /// Apply a projection to every mention vector.
    Project(ProjectArgs),
    /// Average mention vectors into concept embeddings.
    Aggregate(AggregateArgs),
    /// Per-class linear classification, macro-F1.
    EvalClf(EvalClfArgs),
    /// Per-class mention-set classification, macro-F1.
    EvalMentionClf(EvalMentionClfArgs),
    /// k-means clustering purity.
    EvalCluster(EvalClusterArgs),
    /// Nearest concepts of some words.
    Neighbors(NeighborsArgs),
    /// Histogram of cosines between random concept pairs.
    Anisotropy(AnisotropyArgs),
    /// Mention pairs that became neighbours only after tuning.
    NeighborShift(NeighborShiftArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Filter(_) => "filter",
            Command::MineNeigh(_) => "mine-neigh",
            Command::MineCn(_) => "mine-cn",
            Command::TrainProj(_) => "train-proj",
            Command::Project(_) => "project",
            Command::Aggregate(_) => "aggregate",
            Command::EvalClf(_) => "eval-clf",
            Command::EvalMentionClf(_) => "eval-mention-clf",
            Command::EvalCluster(_) => "eval-cluster",
            Command::Neighbors(_) => "neighbors",
            Command::Anisotropy(_) => "anisotropy",
            Command::NeighborShift(_) => "neighbor-shift",
        }
    }
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Neighbours inspected per mention (default 5).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineNeighArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Neighbourhood size (default 5).
    #[arg(long)]
    pub k: Option<usize>,
    /// Compatibility threshold, `a/b` or a decimal (default 1/2).
    #[arg(long)]
    pub theta: Option<Threshold>,
    /// Pair mentions of the same word instead (baseline).
    #[arg(long)]
    pub word_identity: bool,
    /// Reuse neighbour lists from this file, creating it when missing.
    #[arg(long, value_name = "FILE")]
    pub neighbors_cache: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineCnArgs {
    /// One sentence per line; line numbers (from 0) are sentence ids.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `concept<TAB>property` lines.
    #[arg(long)]
    pub properties: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Let a plural token match a singular phrase.
    #[arg(long)]
    pub plural_folding: bool,
    /// Pair file; property groups go to `<out>.groups`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("data").required(true).args(["pairs", "groups"])))]
pub struct TrainProjArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Pair file from `mine-neigh` or `mine-cn`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Groups file from `mine-cn`; batches sample per property.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    #[arg(long)]
    pub group_sample: Option<usize>,
    #[arg(long)]
    pub group_batch: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Model file; the per-epoch log goes to `<out>.log`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Binary,
    Text,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Kept-mention file from `filter`.
    #[arg(long)]
    pub kept: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TableFormat::Binary)]
    pub format: TableFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalClfArgs {
    /// Concept embeddings, binary or text.
    #[arg(long)]
    pub table: PathBuf,
    /// `word<TAB>class[<TAB>split]` lines.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Negatives drawn per positive concept (default 5).
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Reweight labels inversely to their frequency.
    #[arg(long)]
    pub balanced: bool,
    /// Metrics TSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMentionClfArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalClusterArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// `word<TAB>category` lines.
    #[arg(long)]
    pub gold: PathBuf,
    /// Clusters (default: number of categories).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NeighborsArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long = "word", required = true)]
    pub words: Vec<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnisotropyArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// Concept pairs to sample (default 10000; all pairs when fewer exist).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NeighborShiftArgs {
    /// Store before tuning.
    #[arg(long)]
    pub base: PathBuf,
    /// Same mentions after tuning (e.g. from `project`).
    #[arg(long)]
    pub tuned: PathBuf,
    #[arg(long)]
    pub top_in: Option<usize>,
    #[arg(long)]
    pub top_out: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
