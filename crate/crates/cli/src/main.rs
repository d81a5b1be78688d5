//! `latentgan`: train, evaluate and sample latent-GAN autoencoders.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 corrupt
//! artifact, 4 training failure. `LATENTGAN_OUT` overrides every output
//! directory.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentgan::{AssignmentMethod, CodeSelector, PresetName};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CORRUPT: u8 = 3;
pub const EXIT_TRAINING: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "latentgan", version, about = "Autoencoder with a latent-space InfoGAN prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a preset's default configuration
    InitConfig {
        #[arg(long, default_value = "mnist")]
        preset: PresetName,
        /// Destination file; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory holding the MNIST IDX files
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train (or resume) from a configuration file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured epoch count
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Unsupervised classification error on a labelled test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with the four MNIST IDX files; defaults to the paths in the checkpoint's config
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "hungarian")]
        method: AssignmentMethod,
        /// Report CSV path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid of decoded generator samples
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid sweeping one code across columns
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `catN` (zero-based categorical) or `uN` (one-based continuous)
        #[arg(long)]
        vary: CodeSelector,
        #[arg(long, default_value_t = 10)]
        rows: usize,
        #[arg(long, default_value_t = 10)]
        cols: usize,
        /// Continuous sweep interval; defaults to the preset's traversal range
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
        range: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent GAN alone on a ring of Gaussians and report mmd² and purity
    Oracle {
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        components: usize,
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.1)]
        stddev: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda_disc: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        noise_dim: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Skip the scatter PNG
        #[arg(long)]
        no_scatter: bool,
    },
}

/// Keeps freed buffers in the heap: training reallocates the same large
/// activations every step, and returning them to the OS makes each step
/// page-fault them in again.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn retain_heap() {
    const LIMIT: libc::c_int = 1 << 30;
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
        libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn retain_heap() {}

fn main() -> ExitCode {
    retain_heap();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
