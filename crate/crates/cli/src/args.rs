use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "phase", version, about = "Per-signal physiological embeddings with transfer across cohorts")]
pub struct Cli {
    /// Worker threads (default: all cores). Results are reproducible at 1.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort directory.
    Generate(GenerateArgs),
    /// Label a cohort and write a feature table (raw or ema).
    Prep(PrepArgs),
    /// Train one per-signal embedder.
    TrainEmbedder(TrainEmbedderArgs),
    /// Write hidden-state embeddings of labeled windows.
    Embed(EmbedArgs),
    /// Run an experiment plan: features, downstream model, evaluation.
    TrainDownstream(PlanArgs),
    /// Compute AP with a bootstrap interval from a score file.
    Evaluate(EvaluateArgs),
    /// Run a plan with embedders trained on another cohort.
    Transfer(TransferArgs),
    /// Fine-tune an embedder on a target cohort.
    Finetune(FinetuneArgs),
    /// Interventional SHAP values of a boosted forest.
    Explain(ExplainArgs),
    /// Aggregate run reports into a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Or0,
    Or1,
    Icu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrepRepresentation {
    Raw,
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Fixed,
    Paired,
    Finetuned,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in cohort preset.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of procedures (overrides the configuration).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Seed of the train/valid/test split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    pub valid_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    pub test_frac: f64,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long, value_enum, default_value = "raw")]
    pub representation: PrepRepresentation,
    /// Which split to write; statistics always come from the training split.
    #[arg(long, value_enum, default_value = "all")]
    pub part: Part,
    /// Keep labeled minutes that are multiples of this stride.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Also write the fitted standardization statistics (JSON).
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedderTrainingArgs {
    /// Embedder configuration (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Keep windows ending at multiples of this stride.
    #[arg(long, default_value_t = 1)]
    pub window_stride: usize,
    #[arg(long)]
    pub max_windows: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainEmbedderArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub signal: String,
    /// rand, auto, next, min, hypo or hypo_<task>.
    #[arg(long)]
    pub task: String,
    /// Downstream task a bare `hypo` refers to.
    #[arg(long, default_value = "hypoxemia")]
    pub downstream: String,
    #[command(flatten)]
    pub training: EmbedderTrainingArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Also write the per-epoch losses (JSON).
    #[arg(long)]
    pub history_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Task whose labeled minutes are embedded.
    #[arg(long)]
    pub task: String,
    #[arg(long, value_enum, default_value = "all")]
    pub part: Part,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Experiment plan (JSON).
    #[arg(long)]
    pub plan: PathBuf,
    /// Replaces the plan's seeds with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `<plan-hash>/` (overrides the plan).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Cohort directory the embedders are trained on.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, value_enum, default_value = "fixed")]
    pub variant: Variant,
    /// ICU cohort directory for the paired variant.
    #[arg(long)]
    pub icu: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Target cohort directory.
    #[arg(long)]
    pub cohort: PathBuf,
    #[command(flatten)]
    pub training: EmbedderTrainingArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Also train from scratch and write both validation curves (CSV).
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with `score` and `label` columns.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "custom")]
    pub representation: String,
    #[arg(long, default_value = "unknown")]
    pub cohort: String,
    #[arg(long, default_value_t = phase_core::eval::DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = phase_core::eval::DEFAULT_LEVEL)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Forest written by a GBM run (`gbm.json`).
    #[arg(long)]
    pub forest: PathBuf,
    /// Feature table to explain (as written by `prep`).
    #[arg(long)]
    pub data: PathBuf,
    /// Feature table the background rows are drawn from (default: --data).
    #[arg(long)]
    pub background: Option<PathBuf>,
    #[arg(long, default_value_t = phase_core::explain::DEFAULT_BACKGROUND)]
    pub background_size: usize,
    /// Explain at most this many leading rows.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Also write the top features for a summary plot (CSV).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for `report.json` files.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
