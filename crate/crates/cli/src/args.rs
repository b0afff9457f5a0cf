use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ps3_core::{FusionMode, Modality, ModalitySet};

#[derive(Debug, Parser)]
#[command(
    name = "ps3",
    version,
    about = "Three-modal survival prediction from prototype tokens"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with a planted survival signal.
    Synth(SynthArgs),
    /// Fit per-slide mixtures and stage report embeddings.
    Prototype(CommonArgs),
    /// Cross-validated training, one checkpoint per fold.
    Train(CommonArgs),
    /// Held-out concordance, survival curves and attention summaries.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Cohort manifest (JSON).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run configuration (JSON); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cross-validation folds [default: 5]
    #[arg(long)]
    pub folds: Option<usize>,
    /// full, late or hierarchical
    #[arg(long)]
    pub fusion_mode: Option<FusionMode>,
    /// Modality letters out of p (pathway), h (histology), t (text)
    #[arg(long)]
    pub modalities: Option<ModalitySet>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write cross-modal attention summaries.
    #[arg(long)]
    pub attention: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory for the cohort files and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings (JSON); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub signal_strength: Option<f64>,
    /// pathway, histology or text
    #[arg(long)]
    pub signal_modality: Option<Modality>,
    #[arg(long)]
    pub censoring_rate: Option<f64>,
}
