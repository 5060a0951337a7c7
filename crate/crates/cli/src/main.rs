//! `brainvcs`: synthetic cohorts, training, saliency, aggregation and the
//! volume change score from the command line.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brainvcs::manifest::{Split, VolumeFormat};
use brainvcs::robust::{Strategy, TargetMode};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "brainvcs", version, about = "Saliency evaluation for volumetric classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal cohort with a manifest.
    Synth(SynthArgs),
    /// Train the classifier on the train split of a manifest.
    Train(TrainArgs),
    /// Write per-patient input-gradient maps (or oracle maps).
    Saliency(SaliencyArgs),
    /// Overlap saliency maps with baseline label maps into a region CSV.
    Aggregate(AggregateArgs),
    /// Per-class mean region saliency from a region CSV.
    Distribution(DistributionArgs),
    /// Volume change score of a region CSV against longitudinal volumes.
    Vcs(VcsArgs),
    /// Perturb images with iterated FGSM and report prediction changes.
    Attack(AttackArgs),
    /// ACC, SEN and SPE of a checkpoint on one split.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the phantom spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phantom spec as JSON; defaults are used for missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 80)]
    pub n_ad: usize,
    #[arg(long, default_value_t = 80)]
    pub n_nc: usize,
    /// Patients per class held out as the test split.
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value = "nifti")]
    pub format: VolumeFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "base")]
    pub strategy: Strategy,
    /// Training config (TOML); defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed (model init, data order, masks).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory for the checkpoint, log and provenance.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Emit the planted-atrophy indicator map instead of model gradients.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Planted rates CSV for `--oracle`; defaults to the one beside the manifest.
    #[arg(long, requires = "oracle")]
    pub planted: Option<PathBuf>,
    /// Split to process; all patients when omitted.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `saliency.csv` index written by the saliency subcommand.
    #[arg(long)]
    pub saliency: PathBuf,
    /// Aggregate signed gradients instead of magnitudes.
    #[arg(long)]
    pub signed: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistributionArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub regions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VcsArgs {
    /// Region saliency CSV written by the aggregate subcommand.
    #[arg(long, alias = "saliency")]
    pub regions: PathBuf,
    #[arg(long)]
    pub volumes: PathBuf,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write ΔV vs S rows.
    #[arg(long)]
    pub scatter: Option<PathBuf>,
    /// Also write per-patient P_i rows for this and any `--compare` reports.
    #[arg(long)]
    pub boxplot: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_name: String,
    /// Additional `name=report.json` entries for the box-plot data.
    #[arg(long, value_name = "NAME=REPORT")]
    pub compare: Vec<String>,
    #[arg(long, default_value_t = 0.2)]
    pub max_region_mismatch: f64,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training config supplying alpha, epsilon, steps and target_mode.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub target_mode: Option<TargetModeArg>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TargetModeArg {
    AscendTrueLabel,
    DescendAdverseLabel,
}

impl From<TargetModeArg> for TargetMode {
    fn from(m: TargetModeArg) -> Self {
        match m {
            TargetModeArg::AscendTrueLabel => TargetMode::AscendTrueLabel,
            TargetModeArg::DescendAdverseLabel => TargetMode::DescendAdverseLabel,
        }
    }
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Metrics JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-patient predictions.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Saliency(a) => commands::saliency(a),
        Command::Aggregate(a) => commands::aggregate(a),
        Command::Distribution(a) => commands::distribution(a),
        Command::Vcs(a) => commands::vcs(a),
        Command::Attack(a) => commands::attack(a),
        Command::Metrics(a) => commands::metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the error chain, skipping causes whose text the message already
/// contains (several library errors embed their source in their display).
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let s = cause.to_string();
        if !msg.contains(&s) {
            msg.push_str(": ");
            msg.push_str(&s);
        }
    }
    msg
}
