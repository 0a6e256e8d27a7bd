use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "rotulus", version, about = "Manuscript line transcription pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// Write the result here (atomically) instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Tab-separated output instead of JSON.
    #[arg(long, global = true)]
    pub tsv: bool,
    /// Worker threads for per-line work; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More progress output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

impl Global {
    pub fn jobs(&self) -> usize {
        self.jobs
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Find baselines on a page with the segmentation network; writes PageXML.
    Segment(SegmentArgs),
    /// Cut, rectify and normalize every baseline of a page into PNG files.
    ExtractLines(ExtractArgs),
    /// Train a Kneser-Ney n-gram model and write it as ARPA.
    TrainLm(TrainLmArgs),
    /// Train the line recognizer on a dataset; weights go to `--out`.
    TrainHtr(TrainHtrArgs),
    /// Transcribe the baselines of a page.
    Transcribe(TranscribeArgs),
    /// Decode a stored matrix of per-frame log-probabilities.
    DecodeLogits(DecodeLogitsArgs),
    /// Score hypotheses (or a model) against a test split.
    Evaluate(EvaluateArgs),
    /// Post-correct a transcription with a language model.
    Correct(LlmArgs),
    /// Translate a transcription into English with a language model.
    Translate(LlmArgs),
    /// Case, line and word counts per roll type.
    Stats(DatasetArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Split file: `page_id<TAB>line_id<TAB>train|test` per row.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory with `<page_id>.xml` files; defaults to the split file's directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Segmentation network weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Width pages are resampled to before the network runs.
    #[arg(long, default_value_t = rotulus::nn::SEGMENTATION_WIDTH)]
    pub width: usize,
    #[arg(long, default_value_t = 0.3)]
    pub baseline_threshold: f32,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// PageXML with the baselines.
    #[arg(long)]
    pub pagexml: PathBuf,
    /// Directory receiving one `<line_id>.png` per baseline.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Resize lines to this height; by default they keep the height given by
    /// the page's baseline spacing.
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    /// Model order.
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Corpus with one transcription per line.
    #[arg(long = "in", conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Use the training transcriptions of a dataset instead of `--in`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub root: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainHtrArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// TOML file with training settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch CSV (epoch, loss, cer, wer, lr).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the width-reduced recognizer.
    #[arg(long)]
    pub small: bool,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// ARPA language model for beam-search fusion.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Best-path decoding instead of beam search.
    #[arg(long, conflicts_with = "lm")]
    pub greedy: bool,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub lm_alpha: Option<f64>,
    #[arg(long)]
    pub word_bonus: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub prune_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TranscribeArgs {
    /// Recognizer weights.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// PageXML with the baselines, in reading order.
    #[arg(long)]
    pub pagexml: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct DecodeLogitsArgs {
    /// JSON `{"charset": "...", "log_probs": [[...], ...]}`; the blank is the
    /// last column.
    #[arg(long)]
    pub logits: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 1)]
    pub n_best: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Directory of hypotheses: `<page_id>.xml` (PageXML with text) or
    /// `<page_id>.tsv` (`line_id<TAB>text`).
    #[arg(long, required_unless_present = "weights", conflicts_with = "weights")]
    pub hyp: Option<PathBuf>,
    /// Transcribe the test lines with this recognizer instead.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Label in the report.
    #[arg(long, default_value = "system")]
    pub system: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProviderChoice {
    Mock,
    Http,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ApiChoice {
    Gemini,
    Openai,
}

#[derive(Args, Debug)]
pub struct LlmArgs {
    /// Transcription, one line per line; `-` reads stdin.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ProviderChoice::Http)]
    pub provider: ProviderChoice,
    /// TOML with provider settings (endpoint, model, api_key_env, ...).
    #[arg(long)]
    pub provider_config: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long, value_enum)]
    pub api: Option<ApiChoice>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Cache replies on disk, keyed by request hash.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// TOML service configuration; `ROTULUS_*` variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}
