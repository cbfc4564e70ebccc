use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use garlileo::cli;

/// Continuous-time radar-leg-inertial odometry: synthetic datasets, the
/// estimator, and trajectory evaluation.
#[derive(Parser)]
#[command(name = "garlileo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct NoiseFlags {
    /// Gyro white noise per sample (rad/s).
    #[arg(long = "noise.gyro-sigma")]
    gyro_sigma: Option<f64>,
    /// Accelerometer white noise per sample (m/s^2).
    #[arg(long = "noise.accel-sigma")]
    accel_sigma: Option<f64>,
    /// Doppler white noise per point (m/s).
    #[arg(long = "noise.doppler-sigma")]
    doppler_sigma: Option<f64>,
    /// Fraction of radar points turned into dynamic outliers.
    #[arg(long = "noise.outlier-fraction")]
    outlier_fraction: Option<f64>,
    /// Doppler offset applied to outliers (m/s).
    #[arg(long = "noise.outlier-offset")]
    outlier_offset: Option<f64>,
    /// Orientation-measurement noise (rad).
    #[arg(long = "noise.orient-sigma")]
    orient_sigma: Option<f64>,
    /// Footfall accel spike magnitude (m/s^2).
    #[arg(long = "noise.impact-magnitude")]
    impact_magnitude: Option<f64>,
    /// Per-footfall spike probability.
    #[arg(long = "noise.impact-prob")]
    impact_prob: Option<f64>,
    /// Accelerometer-bias random walk density (m/s^2 per sqrt(s)).
    #[arg(long = "noise.accel-bias-rw")]
    accel_bias_rw: Option<f64>,
    /// Gyro-bias random walk density (rad/s per sqrt(s)).
    #[arg(long = "noise.gyro-bias-rw")]
    gyro_bias_rw: Option<f64>,
}

impl NoiseFlags {
    fn to_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: &Option<f64>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        push("gyro_sigma", &self.gyro_sigma);
        push("accel_sigma", &self.accel_sigma);
        push("doppler_sigma", &self.doppler_sigma);
        push("outlier_fraction", &self.outlier_fraction);
        push("outlier_offset", &self.outlier_offset);
        push("orient_sigma", &self.orient_sigma);
        push("impact_magnitude", &self.impact_magnitude);
        push("impact_prob", &self.impact_prob);
        push("accel_bias_rw", &self.accel_bias_rw);
        push("gyro_bias_rw", &self.gyro_bias_rw);
        out
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-sensor dataset for a named scenario.
    Simulate {
        /// Scenario name (flat_loop, stair_loop, slip_zone).
        #[arg(long)]
        scenario: String,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Noise seed; equal seeds reproduce identical datasets.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        noise: NoiseFlags,
        /// Generic noise-config override, e.g. --set doppler_sigma=0.2.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run the estimator on a dataset directory.
    Run {
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for trajectory and diagnostics.
        #[arg(long)]
        out: PathBuf,
        /// Estimator config JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed recorded in the manifest and used by RANSAC.
        #[arg(long)]
        seed: Option<u64>,
        /// Disable parts of the model: no-gravity, no-s2, no-bias.
        #[arg(long)]
        ablate: Vec<String>,
        /// Config override, e.g. --set weights.gravity=800.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Score an estimated trajectory against ground truth (TUM format).
    Eval {
        /// Estimated trajectory (TUM).
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth trajectory (TUM).
        #[arg(long)]
        gt: PathBuf,
        /// Estimated body-frame gravity log (JSONL) for the angular metric.
        #[arg(long = "est-gravity")]
        est_gravity: Option<PathBuf>,
        /// Relative-pose-error segment length in meters.
        #[arg(long = "rpe-delta", default_value_t = 1.0)]
        rpe_delta: f64,
        /// Write the metric report JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write plot CSV series into this directory.
        #[arg(long = "plot-data")]
        plot_data: Option<PathBuf>,
    },
    /// Write CSV series (xy path, z over time, gravity error) for plotting.
    PlotData {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long = "est-gravity")]
        est_gravity: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, out, seed, force, noise, sets } => {
            let mut overrides = noise.to_overrides();
            overrides.extend(sets.iter().cloned());
            cli::cmd_simulate(scenario, out, *seed, *force, &overrides)
        }
        Command::Run { dataset, out, config, seed, ablate, sets, force } => {
            cli::cmd_run(dataset, out, config.as_deref(), *seed, ablate, sets, *force)
        }
        Command::Eval { est, gt, est_gravity, rpe_delta, out, plot_data } => cli::cmd_eval(
            est,
            gt,
            est_gravity.as_deref(),
            *rpe_delta,
            out.as_deref(),
            plot_data.as_deref(),
        ),
        Command::PlotData { est, gt, est_gravity, out } => {
            cli::cmd_plot_data(est, gt, est_gravity.as_deref(), out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
