//! Subcommands that take a corpus through training, bias analysis,
//! λ-controlled generation, evaluation and fine-tuning. Every command writes
//! into a fresh output directory and finishes with a `manifest.json`.

pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use headbias::generation::Strategy;

/// Exit status for a missing input file.
pub const EXIT_MISSING_INPUT: i32 = 2;
/// Exit status for every other failure.
pub const EXIT_FAILURE: i32 = 1;

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "HEADBIAS_THREADS";

#[derive(Debug)]
pub struct MissingInput(pub PathBuf);

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

pub(crate) fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MissingInput(path.to_path_buf()).into())
    }
}

/// Map an error to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let missing = err.chain().any(|e| {
        e.is::<MissingInput>()
            || e
                .downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
    });
    if missing {
        EXIT_MISSING_INPUT
    } else {
        EXIT_FAILURE
    }
}

#[derive(Debug, Parser)]
#[command(name = "headbias", version, about = "Train small LMs and probe their prediction-head biases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Zipfian corpus (one document per line).
    Synth(SynthArgs),
    /// Build a vocabulary and train a model from scratch.
    Train(TrainArgs),
    /// KL, frequency curve and geometry of the head biases under an intervention.
    Analyze(AnalyzeArgs),
    /// Continue reference prompts for every (λ, strategy) cell of a sweep.
    Generate(GenerateArgs),
    /// Score a directory of generations.
    Eval(EvalArgs),
    /// Continue training on a new corpus and report the frequency-correlation shift.
    Finetune(FinetuneArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must not already hold a run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training text, one document per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory written by `train` or `finetune`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON intervention: {"lambda_ln": .., "use_b_fc": .., "use_b_last": ..}.
    #[arg(long)]
    pub intervention: Option<PathBuf>,
    /// Scale on b_LN; overrides the intervention file.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Reference documents supplying the prompts.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Comma-separated strategies: vanilla, top_k, top_p.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Option<Vec<Strategy>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Reference documents (the prompt source given to `generate`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by `generate`.
    #[arg(long)]
    pub generations: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fine-tuning text, one document per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Size the global thread pool from the environment, once per process.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Finetune(a) => commands::finetune(&a),
    }
}
