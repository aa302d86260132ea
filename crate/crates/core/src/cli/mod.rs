//! The `tumorseg` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 internal error.

mod commands;
mod config;
mod slices;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use commands::{
    evaluate_prepared, Predictor, PreparedEntry, PreprocessManifest, Role, TrainSummary,
};
pub use config::{DatasetConfig, ExperimentConfig, Paths, TrainingConfig};
pub use slices::{render_slice, OVERLAY};

use crate::curriculum::ScheduleKind;
use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tumorseg",
    version,
    about = "Volumetric tumor segmentation with curriculum training"
)]
pub struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record that the run asked for reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom {
        #[arg(long)]
        cases: Option<usize>,
        /// Training fraction of the split.
        #[arg(long)]
        split: Option<f64>,
    },
    /// Prepare cases and cut whole-input and patch samples.
    Preprocess {
        /// Dataset directory holding manifest.json.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train under one schedule.
    Train {
        /// Preprocessed directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_schedule)]
        schedule: Option<ScheduleKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        /// Preprocessed directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training output directory; its final model is evaluated.
        #[arg(long, conflicts_with_all = ["checkpoint", "ground_truth"])]
        model: Option<PathBuf>,
        /// Single-network checkpoint, or the liver network of a cascade.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Tumor network; turns the evaluation into a cascade.
        #[arg(long, requires = "checkpoint")]
        tumor_checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        ground_truth: bool,
        /// Row label in reports.
        #[arg(long)]
        name: Option<String>,
        /// Also write each case's image, ground truth and prediction.
        #[arg(long)]
        save_predictions: bool,
    },
    /// Tabulate evaluation reports.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Export slices as PPM images.
    Slices {
        #[arg(long)]
        volume: PathBuf,
        /// Label mask with tumor = 2.
        #[arg(long)]
        gt: PathBuf,
        /// Binary prediction mask.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        z: Vec<usize>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Shape(_)
        | Error::Format(_)
        | Error::Data(_)
        | Error::Io { .. }
        | Error::RawIo(_)
        | Error::Json(_) => EXIT_DATA,
        Error::Graph(_) => EXIT_INTERNAL,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            exit_code(&e)
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE_NAME: &'static str = ".tumorseg.lock";

    pub fn acquire(dir: &Path) -> crate::Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE_NAME);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::data(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
