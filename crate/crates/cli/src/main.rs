//! `fastpitch` command line. Exit codes: 0 success, 1 runtime failure,
//! 64 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "fastpitch", version, about = "Pitch-conditioned parallel text-to-speech")]
pub struct Cli {
    /// Seed for every random choice (synthetic alignments, toy corpus,
    /// initialization, batching, dropout). Overrides a seed in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the scripted sine-carrier corpus (WAVs, attention matrices, manifest).
    ToyCorpus(ToyCorpusArgs),
    /// Extract mel, pitch and durations for every manifest entry.
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed corpus.
    Train(TrainArgs),
    /// Synthesize one utterance with optional pitch edits.
    Synth(SynthArgs),
    /// Measure mel-generation latency and real-time factor.
    Bench(BenchArgs),
    /// Rate models from a JSON-lines log of pairwise judgments.
    Rank(RankArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ToyCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SyntheticAlignment {
    Uniform,
    Random,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Pipe-separated `wav_path|transcript|speaker_id` lines.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of attention matrices named by utterance id.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub alignments: Option<PathBuf>,
    /// Stand-in durations instead of attention matrices.
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticAlignment>,
    /// TOML or JSON file with optional `mel` and `pitch` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Receives `trace.csv`, `checkpoint/` and periodic `checkpoint-<step>/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Training settings (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture (TOML or JSON). Vocabulary size and mel bands always
    /// come from the data.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Small architecture and schedule used by the acceptance tests.
    #[arg(long, conflicts_with_all = ["config", "model_config"])]
    pub toy: bool,
    /// Total step count to reach; overrides the config.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "text_file", required_unless_present = "text_file")]
    pub text: Option<String>,
    /// File whose contents are the text to speak.
    #[arg(long)]
    pub text_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub speaker: usize,
    /// Add this many Hz to every voiced symbol.
    #[arg(long, allow_hyphen_values = true)]
    pub shift_hz: Option<f64>,
    /// Add this many standard deviations to every voiced symbol.
    #[arg(long, allow_hyphen_values = true)]
    pub shift_std: Option<f64>,
    /// Scale deviations from the utterance's mean pitch.
    #[arg(long, allow_hyphen_values = true)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub invert: bool,
    #[arg(long)]
    pub flatten: bool,
    /// Start from a pitch tensor written by an earlier `synth` (its
    /// `pitch` stem) instead of the model's prediction.
    #[arg(long)]
    pub pitch_in: Option<PathBuf>,
    /// Also write |edited − unedited| mel as `mel_diff`.
    #[arg(long)]
    pub diff: bool,
    /// Also vocode to `audio.wav` with Griffin-Lim.
    #[arg(long)]
    pub wav: bool,
    #[arg(long, default_value_t = fastpitch::dsp::DEFAULT_GRIFFIN_LIM_ITERS)]
    pub griffin_lim_iters: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One utterance per non-empty line; the toy transcripts when omitted.
    #[arg(long)]
    pub text_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Write the report as JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// JSON-lines match log.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = fastpitch::ranking::DEFAULT_PERIOD_SIZE)]
    pub period_size: usize,
    #[arg(long, default_value_t = fastpitch::ranking::DEFAULT_TAU)]
    pub tau: f64,
    /// Write the ranking as a JSON array here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML or JSON with `checkpoint`, `data_dir`, optional `port`/`host`.
    #[arg(long, conflicts_with_all = ["checkpoint", "data_dir"])]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "data_dir")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub data_dir: Option<PathBuf>,
    /// Takes precedence over the config file and `FASTPITCH_PORT`.
    #[arg(long)]
    pub port: Option<u16>,
}

const EXIT_USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
