//! `vgpds` command-line interface.

mod commands;
mod parse;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vgpds::VgpdsError;

#[derive(Parser)]
#[command(name = "vgpds", version, about = "Variational GP dynamical systems for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Predict outputs at new time stamps.
    Generate(GenerateArgs),
    /// Fill in the unobserved columns of a partially observed test sequence.
    Reconstruct(ReconstructArgs),
    /// k-nearest-neighbour reconstruction baseline.
    NnBaseline(NnArgs),
    /// Score a reconstruction against ground truth.
    Evaluate(EvaluateArgs),
    /// Sample a synthetic dataset from the generative model.
    Synth(SynthArgs),
    /// Compare analytic gradients of a checkpoint with central differences.
    Gradcheck(GradcheckArgs),
    /// Emit tidy CSV for external plotting.
    #[command(subcommand)]
    ExportPlot(PlotCommand),
}

#[derive(Args)]
struct ModelSource {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Training data to pair with the checkpoint, overriding the stored path.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration trace CSV (iteration, bound, kl, grad_norm).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    /// Number of inducing points (default min(N, 50)).
    #[arg(long)]
    inducing: Option<usize>,
    /// Temporal kernel, compact (`rbf:1:10+white:0.01`) or JSON.
    #[arg(long, default_value = "rbf:1:1+white:0.01")]
    kernel: String,
    #[arg(long, default_value_t = 0.5)]
    lambda_init: f64,
    #[arg(long, default_value_t = 50)]
    warmup_iters: usize,
    /// Main iteration schedule, comma-separated.
    #[arg(long, default_value = "500")]
    iters: String,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_line_search: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frozen parameter groups, comma-separated (empty string for none).
    #[arg(long, default_value = "period")]
    freeze: String,
    /// `lbfgs` or `scg`.
    #[arg(long, default_value = "lbfgs")]
    method: String,
    /// Independent runs with seeds seed, seed+1, ...; the highest final bound is kept.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Single-column file of test time stamps.
    #[arg(long)]
    times: PathBuf,
    /// `mean.csv` or `mean.csv,var.csv`.
    #[arg(long)]
    out: String,
    /// Treat the test stamps as a continuation of this training sequence id.
    #[arg(long)]
    continue_seq: Option<i64>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Test CSV holding either every feature column or only the observed ones.
    #[arg(long)]
    test: PathBuf,
    /// Observed columns: indices, ranges `a-b` or names.
    #[arg(long)]
    observed_cols: String,
    /// `recon.csv` or `recon.csv,var.csv`.
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    continue_seq: Option<i64>,
}

#[derive(Args)]
struct NnArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    observed_cols: String,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reconstruction CSV; its feature columns are matched to the truth by name.
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Angle columns (within the reconstruction) for the angle-space RMS.
    #[arg(long)]
    angle_cols: Option<String>,
    /// Per-column weights for the scaled cumulative error.
    #[arg(long)]
    weights: Option<String>,
    /// Joint label per column for the cumulative error.
    #[arg(long)]
    joints: Option<String>,
    /// Method label stored in the report.
    #[arg(long, default_value = "vgpds")]
    method: String,
    #[arg(long)]
    k: Option<usize>,
    /// JSON report path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth latent CSV.
    #[arg(long)]
    latents: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequence lengths, comma-separated.
    #[arg(long, default_value = "100")]
    lengths: String,
    #[arg(long, default_value_t = 12)]
    dim: usize,
    #[arg(long, default_value = "rbf:1:10")]
    kernel: String,
    /// ARD weights of the mapping kernel; their count is the latent dimension.
    #[arg(long, default_value = "1,1")]
    mapping_weights: String,
    #[arg(long, default_value_t = 1.0)]
    mapping_variance: f64,
    /// Noise precision (`inf` for noiseless data).
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    time_step: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "")]
    freeze: String,
    /// Coordinates sampled per group.
    #[arg(long, default_value_t = 50)]
    max_coords: usize,
    /// Exit with the numerical-failure code when any group exceeds this error.
    #[arg(long)]
    fail_above: Option<f64>,
}

#[derive(Subcommand)]
enum PlotCommand {
    /// Long-format trace: iteration, series, value.
    Trace {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// ARD weights per latent dimension, absolute and relative to the largest.
    Ard {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame mean squared error of a reconstruction.
    Frames {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("VGPDS_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("VGPDS_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            anyhow::bail!("VGPDS_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<VgpdsError>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::NnBaseline(a) => commands::nn_baseline(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::ExportPlot(p) => commands::export_plot(p),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
