use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod report;
mod rundir;

#[derive(Parser, Debug)]
#[command(name = "gazerep", version, about = "Gaze representation learning from pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the stage this command runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; the run directory is created inside it. Defaults to $GAZEREP_OUT or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads. Computation is single-threaded; values above 1 are accepted and ignored.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Gaze3d,
    Zone,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus with ground truth.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Subjects (overrides corpus.n_subjects).
        #[arg(long)]
        subjects: Option<usize>,
        /// Samples per subject (overrides corpus.samples_per_subject).
        #[arg(long)]
        per_subject: Option<usize>,
    },
    /// Attach pseudo-labels to a manifest, optionally corrupting them.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// oracle, geometric, or external.
        #[arg(long)]
        labeler: Option<String>,
        #[arg(long)]
        gaze_sigma_deg: Option<f64>,
        #[arg(long)]
        pose_sigma_rad: Option<f64>,
        #[arg(long)]
        corrupt_fraction: Option<f64>,
        #[arg(long)]
        corrupt_deg: Option<f64>,
    },
    /// Multi-task pretraining on pseudo-labels.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated subset of pseudo-gaze, head-pose, eye-side.
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        no_nll: bool,
    },
    /// Linear probe on frozen features.
    Probe(AdaptArgs),
    /// Fine-tune backbone and head.
    Finetune(AdaptArgs),
    /// Weighted k-NN zone classification on frozen features.
    Knn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Error-versus-calibration-samples table.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// CSV tables and PNG plots from run directories.
    Report {
        /// Output directory (default: a new run directory under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "gaze3d")]
    pub head: HeadArg,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, subjects, per_subject } => commands::gen_data(&common, subjects, per_subject),
        Command::PseudoLabel {
            common,
            manifest,
            labeler,
            gaze_sigma_deg,
            pose_sigma_rad,
            corrupt_fraction,
            corrupt_deg,
        } => {
            let noise = commands::NoiseFlags {
                gaze_sigma_deg,
                pose_sigma_rad,
                corrupt_fraction,
                corrupt_deg,
            };
            commands::pseudo_label(&common, &manifest, labeler, noise)
        }
        Command::Train {
            common,
            manifest,
            epochs,
            tasks,
            no_nll,
        } => commands::train(&common, &manifest, epochs, tasks, no_nll),
        Command::Probe(a) => commands::adapt(&a, commands::Mode::Probe),
        Command::Finetune(a) => commands::adapt(&a, commands::Mode::Finetune),
        Command::Knn {
            common,
            checkpoint,
            manifest,
            k,
        } => commands::knn(&common, &checkpoint, &manifest, k),
        Command::Calibrate { common, checkpoint, manifest } => commands::calibrate(&common, &checkpoint, &manifest),
        Command::Report { out, runs } => report::run(out, &runs),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
