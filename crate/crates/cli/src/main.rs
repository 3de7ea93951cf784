mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use overrides::MechanismFlags;

#[derive(Parser, Debug)]
#[command(
    name = "ponderlm",
    version,
    about = "Desk-scale pondering language model workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Byte-level BPE tokenizer.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Corpus generation and encoding into token shards.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a model into runs/<name>/.
    Train(TrainArgs),
    /// Perplexity and step sweeps.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Per-step top candidates at the last prompt position.
    Trace(TraceArgs),
    /// Cosine, KL and spectral analysis of a pondering trace.
    Analyze(AnalyzeArgs),
    /// Closed-form FLOPs per token for a config.
    Flops(FlopsArgs),
}

#[derive(Subcommand, Debug)]
enum TokenizerCmd {
    Train {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Write a synthetic fact/arithmetic/pattern corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        /// Fixes the facts the corpus states.
        #[arg(long, default_value_t = 0)]
        world_seed: u64,
        /// Fixes which sentences are drawn.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Encode text files into a token shard.
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Move this trailing fraction of tokens into a second shard.
        #[arg(long, requires = "valid_out")]
        valid_fraction: Option<f64>,
        #[arg(long)]
        valid_out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory name; defaults to the config file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(flatten)]
    mechanism: MechanismFlags,
    /// Continual pretraining from this checkpoint directory.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    /// Save ckpt/ every N steps as well as at the end.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Stop (with a checkpoint) once this step is reached, leaving the
    /// schedule untouched; continue later with --resume.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Continue from the run's own ckpt/.
    #[arg(long)]
    resume: bool,
    /// Keep optimizer moments out of the final checkpoint.
    #[arg(long)]
    no_optimizer_state: bool,
}

#[derive(Args, Debug, Clone)]
struct EvalData {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Tokens per window; defaults to the training window length.
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long, default_value_t = 16)]
    windows_per_batch: usize,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    Ppl {
        #[command(flatten)]
        data: EvalData,
        /// Pondering steps; defaults to the trained schedule's maximum.
        #[arg(long)]
        steps: Option<usize>,
        /// Write the result as JSON here (plus a manifest beside it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Sweep {
        #[command(flatten)]
        data: EvalData,
        /// `A..B` or a comma-separated list.
        #[arg(long, default_value = "1..10")]
        steps: String,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 3)]
    display_k: usize,
    /// Directory for trace.jsonl, table.txt, trace.bin and the manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// A trace.bin written by `trace` or by a previous `analyze`.
    #[arg(long, conflicts_with = "checkpoint")]
    trace: Option<PathBuf>,
    /// Capture a trace over validation windows instead.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 64)]
    sequences: usize,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long, default_value_t = ponderlm::analysis::DEFAULT_TOP_M)]
    top_m: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    mechanism: MechanismFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match commands::run(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
