use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use deepacq::acquisition::{AcquisitionKind, DEFAULT_NU};
use deepacq::policy::PolicyKind;
use deepacq::tasks::{Family, Split};

#[derive(Debug, Parser)]
#[command(name = "deepacq", version, about = "Meta-learned acquisition policies for discrete Bayesian optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task suite.
    GenTasks(GenTasksArgs),
    /// Fit a deep kernel by marginal likelihood on the training tasks.
    Pretrain(PretrainArgs),
    /// Train a policy and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the random policy) on a split.
    Eval(EvalArgs),
    /// Train and evaluate several policies on the same test tasks.
    Compare(CompareArgs),
}

#[derive(Clone, Debug, Args)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct GenTasksArgs {
    #[arg(long, default_value = "nearest-target")]
    pub family: Family,
    #[arg(long, default_value_t = 40)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10)]
    pub n_validation: usize,
    #[arg(long, default_value_t = 20)]
    pub n_test: usize,
    #[arg(long, default_value_t = 100)]
    pub n_candidates: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub response_scale: f64,
    /// Centers the nearest-target targets cluster around; 0 for uniform targets.
    #[arg(long, default_value_t = 3)]
    pub target_clusters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub target_spread: f64,
    /// Keep raw responses instead of subtracting each task's mean.
    #[arg(long)]
    pub uncentered: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Debug, Args)]
pub struct AcquisitionArgs {
    #[arg(long, default_value = "mi")]
    pub acquisition: AcquisitionKind,
    #[arg(long, default_value_t = DEFAULT_NU)]
    pub nu: f64,
}

#[derive(Clone, Debug, Args)]
pub struct PretrainFlags {
    /// Marginal-likelihood steps for the deep kernel [default: 500].
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub pretrain_lr: f64,
}

#[derive(Clone, Debug, Args)]
pub struct LoopArgs {
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 never stops early.
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[command(flatten)]
    pub pretrain: PretrainFlags,
    /// Add a wall-clock column to the training log.
    #[arg(long)]
    pub log_wall_time: bool,
}

#[derive(Clone, Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, default_value = "ours")]
    pub policy: PolicyKind,
    #[command(flatten)]
    pub acquisition: AcquisitionArgs,
    #[command(flatten)]
    pub pretrain: PretrainFlags,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, default_value = "ours")]
    pub policy: PolicyKind,
    /// Start from this pretrain checkpoint instead of pretraining.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub acquisition: AcquisitionArgs,
    #[command(flatten)]
    pub training: LoopArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Only `random` can be evaluated without a checkpoint.
    #[arg(long)]
    pub policy: Option<PolicyKind>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// Comma-separated labels such as `ours-mi,dkl-mi,gp-mi,rl,metabo,random`.
    #[arg(long, value_delimiter = ',', default_value = "ours-mi,dkl-mi,gp-mi,random")]
    pub policies: Vec<String>,
    /// Additional policies loaded from checkpoints, evaluated without training.
    #[arg(long = "load")]
    pub load: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = DEFAULT_NU)]
    pub nu: f64,
    #[command(flatten)]
    pub training: LoopArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}
