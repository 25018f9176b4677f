mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Verification(m) => f.write_str(m),
        }
    }
}

impl From<diseg::Error> for CliError {
    fn from(e: diseg::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "diseg", version, about = "Differentiable segmentation for simultaneous speech translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a planted-boundary synthetic corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Run the wait-seg policy for one or more lagging values.
    Simulate(SimulateArgs),
    /// Score traces: latency, BLEU and boundary quality.
    Eval(EvalArgs),
    /// Run the built-in correctness suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output corpus (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with corpus settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sentences: Option<usize>,
    /// Id of the first sentence; use disjoint ranges for held-out splits.
    #[arg(long)]
    pub first_id: Option<usize>,
    #[arg(long)]
    pub word_types: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub silence_probability: Option<f64>,
    #[arg(long)]
    pub frame_ms: Option<f64>,
    /// 0 for monotone targets, 2 for adjacent swaps.
    #[arg(long)]
    pub reorder_window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// JSON file with model settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on the first N sentences only.
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Upper bound for the sampled lagging value.
    #[arg(long)]
    pub max_k: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub noise_variance: Option<f64>,
    /// Source subword vocabulary; defaults to the largest id in the corpus + 1.
    #[arg(long)]
    pub src_vocab: Option<usize>,
    /// Target vocabulary; defaults to the largest id in the corpus + 1.
    #[arg(long)]
    pub tgt_vocab: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated lagging values; `inf` for the offline limit.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<String>,
    /// Directory for `traces_k<k>.jsonl` files.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Trace files, one lagging value each.
    #[arg(long, num_args = 1.., required = true)]
    pub traces: Vec<PathBuf>,
    /// Boundary matching tolerance in frames.
    #[arg(long)]
    pub tolerance_frames: usize,
    /// Output CSV; a JSON report is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report path; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test hook: offset added to every analytic gradient.
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub perturb_gradient: f64,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
