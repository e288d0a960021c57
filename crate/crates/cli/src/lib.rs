//! The `gt360` command-line front end.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gt360_core::data::SourceFormat;
use gt360_core::train::Stage;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (",
    env!("CARGO_PKG_NAME"),
    ", built for ",
    env!("BUILD_TARGET"),
    ")"
);

#[derive(Debug, Parser)]
#[command(name = "gt360", version, long_version = LONG_VERSION)]
#[command(about = "Eye-contact, out-of-frame and in-frame gaze target estimation")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "TOML")]
    pub config: Option<PathBuf>,

    /// Seed for model initialization and all randomized steps.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify every detected head in one image.
    Infer(InferArgs),
    /// Train the gaze decoder for one stage.
    Train(TrainArgs),
    /// Score predictions against an annotation manifest.
    Eval(EvalArgs),
    /// Dataset conversion and labeling tools.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Write an overlay PNG here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Eye-contact cut-off.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub ec_weights: Option<PathBuf>,
    /// Gaze checkpoint directory.
    #[arg(long)]
    pub gaze_weights: Option<PathBuf>,
    /// Print one JSON object per head.
    #[arg(long)]
    pub json: bool,
    /// Head detections for the stub detector (annotation JSONL).
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Save each decoded heatmap here as safetensors.
    #[arg(long)]
    pub heatmap_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: Stage,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a fresh decoder.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions as written by `infer --json`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Annotation manifest.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Convert a dataset to the unified manifest.
    Convert {
        #[arg(long)]
        source: SourceFormat,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label 3-D gaze records as eye contact or not.
    LabelEc {
        /// JSONL of {"face_center": [x, y, z], "gaze_target": [x, y, z]} in mm.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = gt360_core::data::EC_THRESHOLD_MM)]
        threshold_mm: f64,
    },
    /// Pick evenly spaced frames from each video.
    SampleEyediap {
        /// Lines of `video_id,frame_count`.
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = gt360_core::data::FRAMES_PER_VIDEO)]
        per_video: usize,
    },
    /// Write synthetic gaze scenes (a head disk and a bright target dot) and their manifest.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 448)]
        size: u32,
        /// Fraction of scenes with an in-frame target.
        #[arg(long, default_value_t = 0.5)]
        in_frame: f64,
        /// Output directory; the manifest is written as manifest.jsonl inside it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let cfg = match commands::load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    match commands::dispatch(&cli, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
