//! `klgrade`: phantom cohort generation, curation, detector and classifier
//! training, inference, evaluation and the simulated reader study.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;
mod heatmap;
mod report;
mod run;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use run::Run;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "klgrade", version, about = "Knee osteoarthritis KL grading pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides `seeds.base`.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom cohort into <output>/cohort.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overrides `phantom.n_patients`.
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Apply exclusions, map grades and split by patient.
    Curate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one joint detector per (view, side).
    TrainDetector {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured classifier variants.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Grade the test split with every trained classifier.
    Infer {
        #[command(flatten)]
        common: Common,
    },
    /// Detection metrics, accuracy table and confusion matrices.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Simulated readers vs the model: pairwise kappa matrices.
    ReaderStudy {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Curate { common }
            | Command::TrainDetector { common }
            | Command::TrainClassifier { common }
            | Command::Infer { common }
            | Command::Eval { common }
            | Command::ReaderStudy { common } => common,
        }
    }
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    let (cfg, text) = match RunConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Err(e) = run::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = Run::open(cfg, &text, common.seed, common.output.clone()).and_then(|run| match &cli.command {
        Command::Generate { patients, .. } => commands::generate(&run, *patients),
        Command::Curate { .. } => commands::curate(&run),
        Command::TrainDetector { .. } => commands::train_detector_cmd(&run),
        Command::TrainClassifier { .. } => commands::train_classifier_cmd(&run),
        Command::Infer { .. } => commands::infer(&run),
        Command::Eval { .. } => commands::eval(&run),
        Command::ReaderStudy { .. } => commands::reader_study(&run),
    });
    match result {
        Ok(report) => {
            eprintln!("{} done: {} outputs", report.stage, report.outputs.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
