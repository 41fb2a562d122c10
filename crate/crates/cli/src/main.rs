mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use bytelm::error::Error;

/// Byte-level span-denoising pretraining and evaluation pipeline.
#[derive(Parser, Debug)]
#[command(name = "bytelm", version, about)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus preparation.
    Corpus {
        #[command(subcommand)]
        op: CorpusOp,
    },
    /// Synthetic corpora.
    Synth {
        #[command(subcommand)]
        op: SynthOp,
    },
    /// Span-corruption example files.
    Examples {
        #[command(subcommand)]
        op: ExamplesOp,
    },
    /// Pretrain a model on an example file.
    Pretrain(PretrainArgs),
    /// Finetune a checkpoint on a task, once per seed.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a task dataset.
    Evaluate(EvaluateArgs),
    /// Finite-difference checks of every op and the model loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand, Debug)]
enum CorpusOp {
    /// Keep the longest prefix of one language's documents within a byte budget.
    Trim(TrimArgs),
}

#[derive(Subcommand, Debug)]
enum SynthOp {
    /// Generate a hierarchical or nonsense corpus.
    Generate(SynthArgs),
}

#[derive(Subcommand, Debug)]
enum ExamplesOp {
    /// Pack a corpus into span-corrupted examples.
    Build(BuildArgs),
}

#[derive(Args, Debug)]
pub struct TrimArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub budget_bytes: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `hier` or `nonsense`.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bytes: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Natural-text JSONL the hierarchical vocabulary is counted from.
    #[arg(long)]
    pub vocab_corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a pretraining checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Nli,
    Qa,
}

#[derive(Args, Debug)]
pub struct TaskArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 3)]
    pub num_classes: usize,
    #[arg(long, default_value = "en")]
    pub language: String,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub validation: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
    Both,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub dtype: DTypeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model config JSON; the desk model when absent.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Sampled coordinates per parameter tensor.
    #[arg(long, default_value_t = 4)]
    pub coords: usize,
    #[arg(long)]
    pub skip_model: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    /// 2 configuration or usage, 3 data, 4 numerical.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::CheckFailed(_) | CliError::Core(Error::NonFinite(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Corpus { op: CorpusOp::Trim(a) } => commands::corpus_trim(&a),
        Command::Synth { op: SynthOp::Generate(a) } => commands::synth_generate(&a),
        Command::Examples { op: ExamplesOp::Build(a) } => commands::examples_build(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
