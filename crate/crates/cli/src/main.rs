//! `v4d` — phantom generation, preprocessing, two-stage training,
//! segmentation, and trace analysis for 4D vessel movies, driven by one
//! JSON config.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! divergence.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "v4d",
    version,
    about = "Temporal microvascular segmentation of 4D two-photon movies"
)]
struct Cli {
    /// Worker threads for voxel/frame-parallel stages (env: V4D_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; flags override config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic photon-sparse vessel movie with ground truth.
    Phantom {
        /// Phantom spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for noisy.v4d, mask.v4d, truth tables, rois.
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize a movie and downsample it to a target rate.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        target_hz: f32,
        #[arg(long)]
        out: PathBuf,
        /// Skip the temporal downsampling and only normalize.
        #[arg(long)]
        no_downsample: bool,
    },
    /// Train on the time-collapsed movie and emit the anchor skeleton.
    TrainStatic {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Preprocessed input movie override.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Retrain per-frame against the anchor skeleton.
    TrainTemporal {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Anchor skeleton volume (k_anchor.v4d from train-static).
        #[arg(long)]
        anchor: PathBuf,
        /// Starting checkpoint (checkpoint.v4dp from train-static).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segment a movie with a trained checkpoint.
    Segment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-frame skeleton movie next to the output.
        #[arg(long)]
        skeletons: bool,
    },
    /// Trace-based measurements over a segmented movie.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Run the built-in oracle suites (morphology, skeleton, gradients).
    Selftest,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-depth ROI traces.
    Traces {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seg: PathBuf,
        /// Multiply the segmentation by this intensity movie.
        #[arg(long)]
        intensity: Option<PathBuf>,
        #[arg(long)]
        roi: Option<PathBuf>,
    },
    /// Full Pearson matrix and the neighbourhood-average table.
    Correlation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        roi: Option<PathBuf>,
    },
    /// Zero-phase low-passed traces.
    Lowpass {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        roi: Option<PathBuf>,
        #[arg(long)]
        cutoff_hz: Option<f64>,
    },
    /// Vasodilation/vasoconstriction onsets per depth.
    Onsets {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        roi: Option<PathBuf>,
        /// dilation, constriction, or both.
        #[arg(long, default_value = "both")]
        kind: String,
    },
    /// Equivalent-diameter ratio between two magnifications.
    Diameter {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seg_x1: PathBuf,
        #[arg(long)]
        roi_x1: PathBuf,
        #[arg(long)]
        seg_x2: PathBuf,
        #[arg(long)]
        roi_x2: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("V4D_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    let code = match commands::dispatch(cli.command, threads) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.exit_code
        }
    };
    std::process::exit(code);
}
