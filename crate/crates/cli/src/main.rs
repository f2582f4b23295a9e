//! `attrenhance`: builds the synthetic dataset, trains the classifier and the
//! two enhancer GANs, evaluates, runs the complete pipeline and emits reports.
//!
//! Exit codes: 0 on success, 1 when the input is invalid (arguments, config,
//! image sizes), 2 when a run fails.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attrenhance", version, about = "People-attribute classification with de-occlusion and super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Network training.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Classifier metrics on one manifest.
    Eval(EvalArgs),
    /// The complete model on a manifest.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Plots and summary tables.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config merged over the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value` override; applied after the file and ATTRENHANCE_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Render the train split and the clean, occluded and low-resolution test sets.
    Build {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Train the part-based attribute classifier.
    Classifier(TrainArgs),
    /// Train the reconstruction or super-resolution GAN.
    Gan {
        #[arg(long, value_enum)]
        which: Which,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `dataset build`.
    #[arg(long)]
    pub data: PathBuf,
    /// Models directory; checkpoints, history and logs go here.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoints already in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Which {
    Reconstruction,
    Sr,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Models directory; only the classifier is used.
    #[arg(long)]
    pub models: PathBuf,
    /// A `*.jsonl` split file inside a dataset directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Plain classification versus the complete model on every manifest image.
    Run {
        #[command(flatten)]
        eval: EvalArgs,
        /// Occlusion-down probability above which an image is reconstructed.
        #[arg(long)]
        trigger: Option<f64>,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// SVG curves and a CSV table from a training history.
    Plot {
        #[arg(long)]
        history: PathBuf,
        /// SVG path; the CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupted versus restored metrics on the three test variants and their merge.
    Restoration {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for restoration.json and restoration.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Dataset(DatasetCommand::Build { config, out, overwrite }) => commands::dataset_build(&config, &out, overwrite),
        Command::Train(TrainCommand::Classifier(args)) => commands::train_classifier(&args),
        Command::Train(TrainCommand::Gan { which, train }) => commands::train_gan(&train, which),
        Command::Eval(args) => commands::eval(&args),
        Command::Pipeline(PipelineCommand::Run { eval, trigger }) => commands::pipeline_run(&eval, trigger),
        Command::Report(ReportCommand::Plot { history, out }) => commands::report_plot(&history, &out),
        Command::Report(ReportCommand::Restoration { config, models, data, out }) => {
            commands::report_restoration(&config, &models, &data, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if commands::is_validation(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
