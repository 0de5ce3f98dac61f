use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use uatriage::mc::{DEFAULT_BINS, DEFAULT_PASSES};
use uatriage::synthgen::NUM_CLASSES;
use uatriage::triage::{DEFAULT_PERCENTILE, DEFAULT_WINDOW};

#[derive(Debug, Parser)]
#[command(name = "uatriage", version, about = "Uncertainty-aware image triage with MC dropout")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread. Outputs are identical either way.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Generate the synthetic five-class dataset (train/ and test/ subdirectories)
    Synth(SynthArgs),
    /// Train the reference network on a directory-per-class dataset
    Train(TrainArgs),
    /// Deterministic prediction for one image
    Predict(PredictArgs),
    /// Monte Carlo dropout predictive distribution for one image
    McPredict(McPredictArgs),
    /// Deep Taylor relevance heatmap for one image
    Explain(ExplainArgs),
    /// Per-class confidence thresholds from a training set
    Calibrate(CalibrateArgs),
    /// Accept/refer decisions and metrics on a test set
    Triage(TriageArgs),
    /// Accuracy as the least confident samples are removed
    Curve(CurveArgs),
    /// Re-run the command recorded in a manifest
    #[serde(skip)]
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::McPredict(_) => "mc-predict",
            Command::Explain(_) => "explain",
            Command::Calibrate(_) => "calibrate",
            Command::Triage(_) => "triage",
            Command::Curve(_) => "curve",
            Command::Rerun(_) => "rerun",
        }
    }
}

fn parse_counts(s: &str) -> Result<[usize; NUM_CLASSES], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != NUM_CLASSES {
        return Err(format!("expected {NUM_CLASSES} comma-separated counts, got {}", parts.len()));
    }
    let mut out = [0; NUM_CLASSES];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad count `{p}`"))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory (replaced if it holds a previous synth run)
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class: amd,csr,dr,mh,normal
    #[arg(long, value_parser = parse_counts, default_value = "20,25,40,50,90")]
    pub counts: [usize; NUM_CLASSES],
    /// Gaussian pixel noise
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Fraction of images blended with another class
    #[arg(long, default_value_t = 0.0)]
    pub ambiguous: f64,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Weight file to write
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV (defaults to the weight file path with `.history.csv`)
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = 45)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Augmentation magnitude (rotation, shift, shear, zoom)
    #[arg(long, default_value_t = 0.10)]
    pub augment: f64,
    /// Disable random horizontal flips
    #[arg(long)]
    pub no_flip: bool,
    /// Held-out fraction per class for validation accuracy
    #[arg(long, default_value_t = 0.10)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct McPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-pass probabilities CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Per-class histogram CSV
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Normalised heatmap (PGM)
    #[arg(long)]
    pub out: PathBuf,
    /// Raw relevance CSV
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Target class, by name or index (default: predicted class)
    #[arg(long)]
    pub class: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingArg {
    Predicted,
    True,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    pub percentile: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Group training samples by predicted or true class
    #[arg(long, value_enum, default_value_t = GroupingArg::Predicted)]
    pub grouping: GroupingArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TriageArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub thresholds: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// Manifest written by an earlier run
    pub manifest: PathBuf,
}
