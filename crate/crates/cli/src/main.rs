mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "advage", version, about = "Domain-adversarial age prediction from RNA-seq counts")]
pub struct Cli {
    /// Preset name (paper-defaults, paper-intervention) or a TOML/JSON file.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Overrides the model and synth seeds of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every file a command writes.
    #[arg(long, global = true, default_value = "advage-out")]
    pub out: PathBuf,
    /// Folds trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Tsv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Loso,
    Holdout,
    Intervention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Count matrices, one dataset directory per series.
    Expression,
    /// Two-group prediction table for `compare`.
    Groups,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter genes, normalize and fit the standardizer on one dataset.
    Preprocess {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        lengths: Option<PathBuf>,
        #[arg(long)]
        allowlist: Option<PathBuf>,
    },
    /// Train on dataset directories holding counts.tsv and metadata.tsv.
    Train {
        #[arg(required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Dataset id held out in holdout mode; repeatable.
        #[arg(long)]
        holdout: Vec<String>,
        #[arg(long, conflicts_with = "alpha_grid")]
        alpha: Option<f64>,
        /// Train once per alpha of the config grid, into alpha_<value> directories.
        #[arg(long)]
        alpha_grid: bool,
    },
    /// Cross-dataset stability of trained runs.
    Evaluate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Linear probes for attributes on a trained model's latent space.
    Probe {
        /// Fold directory holding best.ckpt and artifact.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(required = true)]
        data: Vec<PathBuf>,
        /// sex, tissue, platform or series_id; repeatable, default all.
        #[arg(long)]
        attribute: Vec<String>,
    },
    /// Welch tests per stratum with Benjamini-Hochberg adjustment.
    Compare {
        #[arg(long)]
        table: PathBuf,
        #[command(flatten)]
        contrast: ContrastArgs,
    },
    /// Write synthetic data with planted signal.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Expression)]
        kind: SynthKind,
        /// Write one pooled dataset instead of one per series.
        #[arg(long)]
        pooled: bool,
    },
    /// Ranked gene list of a trained gate.
    ExportGenes {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        top: Option<usize>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = true)]
pub struct ContrastArgs {
    #[arg(long, requires = "treated", conflicts_with_all = ["young", "old"])]
    pub control: Option<String>,
    #[arg(long, requires = "control")]
    pub treated: Option<String>,
    #[arg(long, requires = "old")]
    pub young: Option<String>,
    #[arg(long, requires = "young")]
    pub old: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
