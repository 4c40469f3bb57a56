use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "kcal", version, about = "Kernel-density calibration of multi-class classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw labelled samples from a Gaussian mixture with a known posterior.
    Synth(SynthArgs),
    /// Train the projection on training embeddings.
    Train(TrainArgs),
    /// Project a calibration set, choose the bandwidth, and write a model.
    Calibrate(CalibrateArgs),
    /// Calibrated probabilities for query embeddings.
    Predict(PredictArgs),
    /// Accuracy, ECE, class-wise ECE, Brier scores and NLL.
    Eval(EvalArgs),
    /// Reliability-diagram bins.
    Reliability(ReliabilityArgs),
    /// Retune the bandwidth on nested calibration subsets and fit the size law.
    Sweep(SweepArgs),
    /// Temperature-scaling baseline.
    TempScale(TempScaleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InputArg {
    Embeddings,
    Logits,
}

impl From<InputArg> for kcal::projection::InputKind {
    fn from(v: InputArg) -> Self {
        match v {
            InputArg::Embeddings => Self::Embeddings,
            InputArg::Logits => Self::Logits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Adaptive,
    Static,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Minimum distance between class means.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Comma-separated class priors; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    pub priors: Option<Vec<f64>>,
    /// Total number of samples, classes drawn from the priors.
    #[arg(long, conflicts_with = "per_class")]
    pub n: Option<usize>,
    /// Exact number of samples per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reuse the mixture from an oracle JSON instead of building a new one.
    #[arg(long)]
    pub from_oracle: Option<PathBuf>,
    #[arg(long)]
    pub out_emb: PathBuf,
    #[arg(long)]
    pub out_labels: PathBuf,
    #[arg(long)]
    pub out_oracle: Option<PathBuf>,
    /// Exact posterior of the drawn samples, as KPRB.
    #[arg(long)]
    pub out_posterior: Option<PathBuf>,
    /// Logits `scale * log posterior + offset_k`, as KLGT.
    #[arg(long)]
    pub out_logits: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub logit_scale: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub logit_offsets: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training embeddings (KEMB), or logits (KLGT) with `--input logits`.
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Output projection (KPRJ).
    #[arg(long)]
    pub out: PathBuf,
    /// Training report JSON; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Background samples per class.
    #[arg(long)]
    pub background: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    /// mlp2 (default), linear or identity.
    #[arg(long)]
    pub arch: Option<String>,
    /// Output dimension; defaults to min(h, 32).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_enum)]
    pub input: Option<InputArg>,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Trained projection (KPRJ).
    #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
    pub projection: Option<PathBuf>,
    /// Use the raw inputs as the projected space.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "embeddings")]
    pub input: InputArg,
    /// Tune with leave-one-out loss on the calibration set.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub loo: bool,
    /// Use this bandwidth instead of searching.
    #[arg(long, conflicts_with = "bandwidth_law")]
    pub bandwidth: Option<f64>,
    /// Take the bandwidth from a fitted size law (JSON).
    #[arg(long)]
    pub bandwidth_law: Option<PathBuf>,
    #[arg(long)]
    pub lb: Option<f64>,
    #[arg(long)]
    pub ub: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Also write the tuning-time calibration-set probabilities (KPRB).
    #[arg(long)]
    pub loo_probs: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Queries are the calibration set itself; exclude each from its own sums.
    #[arg(long)]
    pub loo: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub probs: PathBuf,
    #[arg(long, required_unless_present = "validate")]
    pub labels: Option<PathBuf>,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = kcal::metrics::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub scheme: SchemeArg,
    /// Fixed class-wise threshold instead of max(0.01, 1/K).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Check that every row lies on the simplex.
    #[arg(long)]
    pub validate: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ReliabilityArgs {
    #[arg(long)]
    pub probs: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// `confidence` or `class:<k>`.
    #[arg(long, default_value = "confidence")]
    pub axis: String,
    #[arg(long, default_value_t = kcal::metrics::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "adaptive")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = kcal::metrics::DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Calibration pool embeddings.
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
    pub projection: Option<PathBuf>,
    #[arg(long)]
    pub identity: bool,
    #[arg(long, value_enum, default_value = "embeddings")]
    pub input: InputArg,
    /// Comma-separated total calibration sizes; each is split evenly across classes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub loo: bool,
    /// Held-out evaluation set; without it metrics are leave-one-out on each subset.
    #[arg(long, requires = "test_labels")]
    pub test_emb: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Mixture oracle for the true posterior of the test set.
    #[arg(long, requires = "test_emb")]
    pub oracle: Option<PathBuf>,
    #[arg(long, default_value_t = kcal::metrics::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Fitted bandwidth law JSON; defaults to `<out>.law.json`.
    #[arg(long)]
    pub law_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TempScaleArgs {
    /// Calibration logits (KLGT) used to fit the temperature.
    #[arg(long)]
    pub cal_logits: PathBuf,
    #[arg(long)]
    pub cal_labels: PathBuf,
    /// Logits to rescale.
    #[arg(long)]
    pub logits: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Temperature JSON; defaults to `<out>.temperature.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}
