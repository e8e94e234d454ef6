//! Pipeline driver: synthetic data generation, training, novel-view
//! rendering, expression editing, sequence reenactment and evaluation.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
fn error_exit_code(err: &warpfield::Error) -> u8 {
    use warpfield::Error::*;
    match err {
        InvalidArgument { .. } => 1,
        Io(_) | Json(_) | Image(_) | Manifest { .. } | FrameNotFound { .. } | EmptySplit
        | Checkpoint { .. } => 2,
        NonFiniteLoss { .. } => 3,
    }
}

#[derive(Parser)]
#[command(name = "warpfield", version, about = "Few-shot deformable radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset with analytic ground truth.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        blobs: usize,
        #[arg(long = "expr-dim", default_value_t = 2)]
        expr_dim: usize,
        /// Frames reserved for the validation split (taken from the end).
        #[arg(long, default_value_t = 2)]
        val_frames: usize,
    },
    /// Train a model on a tracked-frame dataset.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long = "rays-per-step", default_value_t = 1024)]
        rays_per_step: usize,
        #[arg(long = "n-coarse", default_value_t = 64)]
        n_coarse: usize,
        #[arg(long = "n-fine", default_value_t = 64)]
        n_fine: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed input frame ids (comma separated). Random tuples otherwise.
        #[arg(long, value_delimiter = ',')]
        inputs: Option<Vec<usize>>,
        #[arg(long = "m-min", default_value_t = 1)]
        m_min: usize,
        #[arg(long = "m-max", default_value_t = 12)]
        m_max: usize,
        /// Append-only CSV training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Model size preset.
        #[arg(long, default_value = "default", value_parser = ["default", "compact"])]
        preset: String,
        /// Print loss every N iterations (0 silences progress).
        #[arg(long = "log-every", default_value_t = 100)]
        log_every: u64,
    },
    /// Render novel views; target expression comes from the first input.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<usize>,
        /// JSON list of poses [{"pose_R": [9], "pose_t": [3]}, ...].
        #[arg(long = "pose-file")]
        pose_file: Option<PathBuf>,
        /// Alternative: borrow poses from these manifest frames.
        #[arg(long = "pose-frames", value_delimiter = ',')]
        pose_frames: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override render resolution (intrinsics rescale accordingly).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long = "n-coarse", default_value_t = 64)]
        n_coarse: usize,
        #[arg(long = "n-fine", default_value_t = 64)]
        n_fine: usize,
    },
    /// Render with an explicit target expression vector.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<usize>,
        /// Target expression, comma separated ("0.1,0.2").
        #[arg(long, allow_hyphen_values = true)]
        delta: String,
        #[arg(long = "pose-file")]
        pose_file: Option<PathBuf>,
        #[arg(long = "pose-frames", value_delimiter = ',')]
        pose_frames: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long = "n-coarse", default_value_t = 64)]
        n_coarse: usize,
        #[arg(long = "n-fine", default_value_t = 64)]
        n_fine: usize,
    },
    /// Drive the model with an expression sequence, window-smoothed.
    Reenact {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<usize>,
        /// Driver file: one expression vector per line, comma separated.
        #[arg(long)]
        driver: PathBuf,
        /// Window radius L; frames [t-L, t+L] pool into each target code.
        #[arg(long, default_value_t = 13)]
        window: usize,
        #[arg(long = "pose-file")]
        pose_file: Option<PathBuf>,
        #[arg(long = "pose-frames", value_delimiter = ',')]
        pose_frames: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long = "n-coarse", default_value_t = 64)]
        n_coarse: usize,
        #[arg(long = "n-fine", default_value_t = 64)]
        n_fine: usize,
    },
    /// Render the validation split and report PSNR/SSIM.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<usize>,
        #[arg(long, default_value = "val", value_parser = ["val", "train"])]
        split: String,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-coarse", default_value_t = 64)]
        n_coarse: usize,
        #[arg(long = "n-fine", default_value_t = 64)]
        n_fine: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version go to stdout with success
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e))
        }
    }
}
