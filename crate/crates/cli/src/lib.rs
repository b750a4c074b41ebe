//! The `xdesc` command line tool.
//!
//! Every subcommand can write a JSON [`files::Report`] with `--report`.
//! [`run`] returns the process exit code: 0 on success, 2 on usage errors,
//! 1 on runtime errors (the message goes to stderr).

pub mod commands;
pub mod files;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Core(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<xdesc_core::Error> for CliError {
    fn from(e: xdesc_core::Error) -> Self {
        CliError::Core(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "xdesc",
    version,
    about = "Translate, embed and match heterogeneous local feature descriptors"
)]
pub struct Cli {
    /// Worker threads for matching (falls back to XDESC_THREADS).
    #[arg(long, global = true, env = "XDESC_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic descriptor families (a dataset, or a multi-view image set with --views).
    Gen(GenArgs),
    /// Train one directional translation network.
    TrainPair(TrainPairArgs),
    /// Train an encoder/decoder bank over several families.
    TrainBank(TrainBankArgs),
    /// Translate descriptors with a pair network or a bank.
    Translate(TranslateArgs),
    /// Encode descriptors into the joint space of a bank.
    Encode(EncodeArgs),
    /// Match two descriptor files.
    Match(MatchArgs),
    /// Build a match graph, tracks and co-visibility statistics over an image set.
    Scenario(ScenarioArgs),
    /// Patch-ID matching recall for every ordered family pair of a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Write a JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = xdesc_core::train::DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// Defaults to min(1024, N/40).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = xdesc_core::train::DEFAULT_LR)]
    pub lr: f64,
    /// Hidden width override (default 1024 for handcrafted-like families, 256 otherwise).
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    /// JSON list of family configs. Defaults to the four stand-in families.
    #[arg(long)]
    pub families: Option<PathBuf>,
    /// Seed base of the default families.
    #[arg(long, default_value_t = 7)]
    pub family_seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Latent seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Observation noise seed (defaults to one derived from --seed).
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long, default_value_t = xdesc_core::synthetic::DEFAULT_LATENT_DIM)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub first_id: u64,
    /// Write an image set with this many views instead of a dataset.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub visibility: f64,
    /// Write text XDSC instead of binary.
    #[arg(long)]
    pub text: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct TrainPairArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub src: String,
    #[arg(long)]
    pub dst: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct TrainBankArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma separated family names (default: every family in the dataset).
    #[arg(long, value_delimiter = ',')]
    pub algos: Vec<String>,
    #[arg(long, default_value = "quadratic")]
    pub variant: String,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = xdesc_core::bank::DEFAULT_EMBED_DIM)]
    pub embed_dim: usize,
    /// Drop the i = j matching terms.
    #[arg(long)]
    pub no_self_matching: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct TranslateArgs {
    #[arg(long, conflicts_with = "bank", required_unless_present = "bank")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "to")]
    pub bank: Option<PathBuf>,
    /// Target family when translating through a bank.
    #[arg(long)]
    pub to: Option<String>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub text: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct EncodeArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Family of the input (defaults to the name stored in the file).
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub text: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MatchMode {
    Naive,
    Translate,
    Embed,
}

#[derive(Args, Debug, Clone)]
pub struct MatchArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, conflicts_with = "model")]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "naive")]
    pub mode: MatchMode,
    #[arg(long, default_value_t = 0.9)]
    pub ratio: f64,
    /// TSV of `index_a index_b distance`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    /// Image set manifest (images.json).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "embed")]
    pub strategy: String,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Pair networks, preferred over the bank for progressive translation.
    #[arg(long)]
    pub model: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    pub ratio: f64,
    /// Weakest to strongest, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hierarchy: Vec<String>,
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Query side dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Database side dataset manifest (defaults to --data).
    #[arg(long)]
    pub data_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "naive")]
    pub mode: MatchMode,
    #[arg(long, conflicts_with = "model")]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    pub ratio: f64,
    #[command(flatten)]
    pub common: Common,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Input(e.to_string()))?;
    pool.install(|| commands::dispatch(cli.command))
}
