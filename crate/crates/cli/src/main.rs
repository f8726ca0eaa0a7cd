// `!(x > 0.0)` checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{AttentionArg, FileConfig, NetworkSection};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "linmatch", version, about = "Keypoint matching with linear and pairwise neighborhood attention")]
pub struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML file overriding built-in defaults (flags override the file).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,

    /// Output file or directory, depending on the command.
    #[arg(short = 'o', long = "output", global = true, value_name = "PATH")]
    pub output: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic image pairs (KPDS, ground truth, homography, manifest).
    Synth(SynthArgs),
    /// Write a LAWT weight file.
    InitWeights(InitArgs),
    /// Match two keypoint sets.
    Match(MatchArgs),
    /// Score a match file against ground truth.
    Eval(EvalArgs),
    /// Time the attention kernels, encoder forward or full pipeline.
    Bench(BenchArgs),
    /// Train a small network on synthetic pairs.
    TrainToy(TrainArgs),
    /// Compare the loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct NetworkArgs {
    /// Descriptor width D.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Encoded width C′.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Self/cross iterations.
    #[arg(long)]
    pub l1: Option<usize>,
    /// Pairwise iterations.
    #[arg(long)]
    pub l2: Option<usize>,
    #[arg(long)]
    pub tie_weights: bool,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionArg>,
}

impl NetworkArgs {
    pub fn section(&self) -> NetworkSection {
        NetworkSection {
            input_dim: self.dim,
            hidden_dim: self.hidden,
            heads: self.heads,
            l1: self.l1,
            l2: self.l2,
            tie_weights: self.tie_weights.then_some(true),
            attention: self.attention,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub kpts: Option<u64>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Descriptor width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Per-dimension descriptor noise on the target copy.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Keypoint jitter in pixels.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
    /// Use the identity homography.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub min_matches: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub network: NetworkArgs,
    /// Weights under which the encoder passes descriptors through (needs D = C′).
    #[arg(long)]
    pub identity: bool,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Stop after distance matching.
    #[arg(long)]
    pub no_filter: bool,
    /// Run without pairwise layers.
    #[arg(long)]
    pub skip_pairwise: bool,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub l1: Option<usize>,
    #[arg(long)]
    pub l2: Option<usize>,
    #[arg(long)]
    pub tie_weights: bool,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long = "gt")]
    pub ground_truth: PathBuf,
    #[arg(long)]
    pub homography: PathBuf,
    /// Pixel thresholds for MMA.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Methods to time, e.g. linear_attention,softmax_attention_reference.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Time the end-to-end pipeline instead.
    #[arg(long)]
    pub pipeline: bool,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmups: Option<usize>,
    #[command(flatten)]
    pub network: NetworkArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub kpts: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Whether the confidence weight receives gradient.
    #[arg(long, value_enum)]
    pub confidence_gradient: Option<ConfidenceGradient>,
    /// Exit 1 unless loss halves and held-out precision gains 20 points.
    #[arg(long)]
    pub check: bool,
    #[command(flatten)]
    pub network: NetworkArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ConfidenceGradient {
    Detach,
    Propagate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    Double,
    Single,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "double")]
    pub precision: Precision,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Relative-error tolerance per entry.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

/// Global settings after merging defaults, the config file and flags.
pub struct Context {
    pub seed: u64,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub file: FileConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.map(|t| t as usize).or(file.threads);
    if threads == Some(0) {
        return Err(CliError::Usage("threads must be at least 1".into()));
    }
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?;
    }
    let ctx = Context {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        threads,
        output: cli.output,
        file,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::InitWeights(a) => commands::init_weights(&ctx, &a),
        Command::Match(a) => commands::run_match(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Bench(a) => commands::bench(&ctx, &a),
        Command::TrainToy(a) => commands::train_toy(&ctx, &a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
