use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stac_core::Error;

mod commands;
mod run;
mod settings;

#[derive(Parser, Debug)]
#[command(name = "stac", version, about = "Teacher/student pseudo-labeling experiments on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run directory for all artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Worker threads for inference and ablation cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// none | c | c+gb | c+gb+cutout
    #[arg(long)]
    pub aug_mode: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset (COCO JSON plus PPM images).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Split an annotation file into labeled and unlabeled subsets.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        fold: Option<u64>,
    },
    /// Train the teacher (or a supervised baseline) on labeled images.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        labeled: PathBuf,
        /// Evaluate the final model on this annotation file.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Run a teacher over unlabeled images and keep confident boxes.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Train a student on labeled images plus a pseudo-label file.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        lambda_u: Option<f64>,
        /// Take the detector configuration from this checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (mAP over IoU 0.5:0.95 and AP50).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Ablations: grid (lambda_u x tau), pool (unlabeled size), aug (mode), quality (pseudo-label precision/recall).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Comma-separated tau values.
        #[arg(long = "tau")]
        taus: Option<String>,
        /// Comma-separated lambda_u values (grid).
        #[arg(long = "lambda-u")]
        lambda_us: Option<String>,
        /// Comma-separated pool multipliers or `full`.
        #[arg(long)]
        pool: Option<String>,
        /// Comma-separated augmentation modes.
        #[arg(long)]
        modes: Option<String>,
    },
    /// Compare the consistency-loss zoo on a toy classification problem.
    SslDemo {
        #[command(flatten)]
        common: Common,
        /// Method name or `all`.
        #[arg(long)]
        method: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Split { .. } => "split",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::PseudoLabel { .. } => "pseudo-label",
            Command::TrainStudent { .. } => "train-student",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::SslDemo { .. } => "ssl-demo",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Data(_) | Error::Geometry(_) | Error::Io { .. } | Error::Json { .. } => 3,
    }
}

fn error_line(command: &str, kind: &str, message: &str) -> String {
    let quoted = serde_json::to_string(message).unwrap_or_else(|_| "\"\"".into());
    format!("error command={command} kind={kind} message={quoted}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("-", "config", first));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(name, e.kind(), &e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
