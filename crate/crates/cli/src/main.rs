//! cobbkit: spinal curvature toolkit. Subcommands cover dataset synthesis,
//! Cobb geometry utilities, mask rasterization, network training with JSON
//! experiment configs, prediction, evaluation, ensembling, gradient
//! checking, and angle-distribution plots.

mod commands;
mod config;
mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use cobbkit_core::geometry::LandmarkLayout;
use commands::{parse_size, CliError, LandmarkReadOptions};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "cobbkit",
    version,
    about = "Cobb angle estimation toolkit: synthesize spine datasets, compute angles from landmarks, rasterize masks, train and evaluate small regression networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    /// 68 lines of `x,y` pixel coordinates, vertebra-major corner order
    Interleaved,
    /// one row of 136 values: all x coordinates then all y coordinates
    ChallengeRow,
}

impl From<LayoutArg> for LandmarkLayout {
    fn from(v: LayoutArg) -> Self {
        match v {
            LayoutArg::Interleaved => LandmarkLayout::Interleaved,
            LayoutArg::ChallengeRow => LandmarkLayout::ChallengeRow,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute Cobb angle triples from landmark CSV files (one output line per file)
    Cobb {
        /// Landmark files to process
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = LayoutArg::Interleaved)]
        layout: LayoutArg,
        /// Treat coordinates as normalized to [0, 1] (needs --size)
        #[arg(long)]
        normalized: bool,
        /// Image geometry HxW, required with --normalized
        #[arg(long)]
        size: Option<String>,
    },
    /// Rasterize the 3-class ground-truth mask from a landmark file
    Rasterize {
        landmarks: PathBuf,
        /// Output mask geometry HxW
        #[arg(long)]
        size: String,
        /// Output PGM path (labels 0 background, 128 gap, 255 bone)
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = LayoutArg::Interleaved)]
        layout: LayoutArg,
        #[arg(long)]
        normalized: bool,
    },
    /// Generate a synthetic spine dataset (images/, landmarks/, angles/)
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image geometry HxW
        #[arg(long)]
        size: String,
        outdir: PathBuf,
    },
    /// Train a regression network from a JSON experiment config
    Train { config: PathBuf },
    /// Predict angle triples for every record under a dataset directory
    Predict {
        checkpoint: PathBuf,
        data_dir: PathBuf,
        /// Write the predictions CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictions CSV against ground truth (an id CSV or a dataset dir)
    Evaluate {
        predictions: PathBuf,
        ground_truth: PathBuf,
        /// Emit the canonical JSON report instead of the table
        #[arg(long)]
        json: bool,
    },
    /// Average prediction files slot-wise and zero angles below the threshold
    Ensemble {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value_t = 4.0)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify every parameter gradient of a configured network against
    /// central finite differences
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Cap on checked scalars for large networks (0 = check everything)
        #[arg(long, default_value_t = 4096)]
        max_params: usize,
    },
    /// Render the distribution of the three angle slots as an SVG histogram
    PlotAngles {
        /// Angle rows: `a1,a2,a3` or `id,a1,a2,a3` per line
        angles: PathBuf,
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Cobb {
            files,
            layout,
            normalized,
            size,
        } => {
            let opts = LandmarkReadOptions {
                layout: layout.into(),
                normalized,
                size: size.as_deref().map(parse_size).transpose()?,
            };
            commands::cmd_cobb(&files, &opts)
        }
        Command::Rasterize {
            landmarks,
            size,
            out,
            layout,
            normalized,
        } => {
            let shape = parse_size(&size)?;
            let opts = LandmarkReadOptions {
                layout: layout.into(),
                normalized,
                size: Some(shape),
            };
            commands::cmd_rasterize(&landmarks, shape, &out, &opts)
        }
        Command::Synth {
            n,
            seed,
            size,
            outdir,
        } => commands::cmd_synth(n, seed, parse_size(&size)?, &outdir),
        Command::Train { config } => commands::cmd_train(&config),
        Command::Predict {
            checkpoint,
            data_dir,
            out,
        } => commands::cmd_predict(&checkpoint, &data_dir, out.as_deref()),
        Command::Evaluate {
            predictions,
            ground_truth,
            json,
        } => commands::cmd_evaluate(&predictions, &ground_truth, json),
        Command::Ensemble {
            files,
            threshold,
            out,
        } => commands::cmd_ensemble(&files, threshold, out.as_deref()),
        Command::Gradcheck {
            config,
            step,
            tolerance,
            max_params,
        } => commands::cmd_gradcheck(&config, step, tolerance, max_params),
        Command::PlotAngles { angles, out } => commands::cmd_plot_angles(&angles, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.code);
    }
}
