//! `s2t`: data preparation and evaluation front end.
//!
//! Exit codes: 0 success, 1 processing failure, 2 usage or input error.
//! Logs go to stderr; reports go to stdout.

mod data;
mod eval;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2t_core::parallel::init_workers;
use s2t_core::Exec;

#[derive(Parser)]
#[command(name = "s2t", version, about = "Speech-to-text data preparation and evaluation")]
struct Cli {
    /// Worker threads (default: all CPUs; 1 runs sequentially).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features from audio and write manifest.tsv and config.yaml.
    Prep(PrepArgs),
    /// Pack a manifest's feature files into one stored ZIP.
    Pack(PackArgs),
    /// Score hypotheses against references.
    Score(ScoreArgs),
    /// Run a simultaneous-translation evaluation.
    Simul(SimulArgs),
    /// Summarize one utterance of a manifest.
    Inspect(InspectArgs),
    /// Compute global CMVN statistics over a manifest.
    Gcmvn(GcmvnArgs),
    /// Serve a policy over the agent line protocol on stdin/stdout.
    #[command(hide = true)]
    Agent(AgentArgs),
}

#[derive(Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub audio_dir: PathBuf,
    /// TSV with header; columns `id`, `tgt_text`, optional `audio`,
    /// `src_text`, `speaker`. Without `audio`, `<id>.wav` or `<id>.flac`.
    #[arg(long)]
    pub transcripts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = s2t_core::dataset::DEFAULT_MAX_FRAMES)]
    pub max_frames: u64,
    /// Comma-separated speed factors, e.g. 0.9,1.0,1.1.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub speed: Vec<f64>,
    /// Write features.zip instead of loose files.
    #[arg(long)]
    pub pack: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// YAML file with fbank settings; the flags below override it.
    #[arg(long)]
    pub fbank_config: Option<PathBuf>,
    #[arg(long)]
    pub num_mel_bins: Option<usize>,
    #[arg(long)]
    pub dither: Option<f64>,
    /// Also store global CMVN statistics in config.yaml.
    #[arg(long)]
    pub gcmvn: bool,
}

#[derive(Args)]
pub struct PackArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for features.zip, manifest.tsv and config.yaml.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub hyps: PathBuf,
    #[arg(long)]
    pub wer: bool,
    #[arg(long)]
    pub bleu: bool,
    #[arg(long)]
    pub chrf: bool,
    /// Character-level BLEU.
    #[arg(long)]
    pub char: bool,
    /// Print a single-line record instead of one key per line.
    #[arg(long)]
    pub record: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum UnitArg {
    Word,
    Ms,
}

#[derive(Args)]
pub struct SimulArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reference lines aligned with the manifest (default: its tgt_text).
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// `waitk:K`, `exec:COMMAND` or `tcp:HOST:PORT`.
    #[arg(long)]
    pub agent: String,
    #[arg(long, value_enum, default_value = "word")]
    pub unit: UnitArg,
    #[arg(long, default_value_t = s2t_core::simul::DEFAULT_CHUNK_MS)]
    pub chunk_ms: u64,
    /// Write one JSON trace per sentence here.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    pub max_actions: usize,
    #[arg(long)]
    pub char: bool,
    #[arg(long)]
    pub record: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split whose transform pipeline is applied.
    #[arg(long, default_value = "dev")]
    pub split: String,
}

#[derive(Args)]
pub struct GcmvnArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct AgentArgs {
    /// `waitk:K` (echoes the source).
    #[arg(long, conflicts_with = "replay")]
    pub policy: Option<String>,
    /// Replay recorded traces (JSON lines) by session id.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

/// A command failure and the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Failure { code: 1, error: error.into() }
    }
}

pub type CmdResult = Result<(), Failure>;

pub trait ExitContext<T> {
    /// Classify the error as bad input (exit 2).
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, error: e.into() })
    }
}

pub fn usage_error(msg: impl Into<String>) -> Failure {
    Failure { code: 2, error: anyhow::anyhow!(msg.into()) }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        init_workers(n);
    }
    let exec = if cli.workers == Some(1) { Exec::Sequential } else { Exec::default() };
    let result = match cli.command {
        Command::Prep(a) => data::prep(&a, exec),
        Command::Pack(a) => data::pack(&a),
        Command::Score(a) => eval::score(&a, exec),
        Command::Simul(a) => eval::simul(&a, exec),
        Command::Inspect(a) => data::inspect(&a),
        Command::Gcmvn(a) => data::gcmvn(&a, exec),
        Command::Agent(a) => eval::agent(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
