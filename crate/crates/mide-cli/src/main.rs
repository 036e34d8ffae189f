//! Command-line entry point: simulate | diagnose | fit | forecast |
//! evaluate | power | gradcheck.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data/model or
//! numerical error. All randomness derives from the configured seed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mide::MideError;

#[derive(Parser)]
#[command(
    name = "mide",
    version,
    about = "Probabilistic multi-height space-time wind forecasting",
    disable_help_subcommand = true
)]
struct Cli {
    /// Worker threads (0 = all cores). Determinism is guaranteed at any
    /// fixed thread count.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fixture (observations, maps, truth.json).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Space-time asymmetry diagnostics from an observation file.
    Diagnose {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        sites: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Largest lag to evaluate, in hours.
        #[arg(long, default_value_t = 6.0)]
        max_lag_hours: f64,
    },
    /// Offline joint fit of the network and statistical parameters.
    Fit {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output model file (a training log lands next to it).
        #[arg(long)]
        out: PathBuf,
        /// Sites CSV; defaults to paths.sites from the config.
        #[arg(long)]
        sites: Option<PathBuf>,
    },
    /// Filter recent observations and forecast ahead.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 144)]
        horizon: usize,
        /// Filtering window length in steps.
        #[arg(long, default_value_t = 1008)]
        window_steps: usize,
        /// Also dump the first forecast-step propagator matrix as CSV.
        #[arg(long)]
        dump_propagator: bool,
    },
    /// Rolling-origin evaluation against persistence and AR benchmarks.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        /// Protocol/config file (protocol.* and train.* keys).
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dump predicted advection vectors and their norm time series.
        #[arg(long)]
        dump_advection: bool,
        /// Maximum autoregressive order for the AR benchmark.
        #[arg(long, default_value_t = 6)]
        ar_max_order: usize,
    },
    /// Fit the wind power curve; optionally convert forecasts to power.
    Power {
        /// Write a synthetic training CSV (documented logistic truth) here.
        #[arg(long)]
        synth_train: Option<PathBuf>,
        #[arg(long, default_value_t = 600)]
        synth_rows: usize,
        /// Power-curve training CSV (hub_speed_mps,shear_above,power).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Forecast CSV to convert to power.
        #[arg(long)]
        forecasts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Hub height (m); defaults to the middle height in the forecasts.
        #[arg(long)]
        hub_height: Option<f64>,
        /// Monte Carlo draws for the probabilistic power mean.
        #[arg(long, default_value_t = 500)]
        draws: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> mide::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| MideError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, out } => commands::cmd_simulate(&config, &out),
        Command::Diagnose {
            obs,
            sites,
            out,
            max_lag_hours,
        } => commands::cmd_diagnose(&obs, &sites, &out, max_lag_hours),
        Command::Fit {
            obs,
            maps,
            config,
            out,
            sites,
        } => commands::cmd_fit(&obs, &maps, &config, &out, sites.as_deref()),
        Command::Forecast {
            model,
            obs,
            maps,
            out,
            horizon,
            window_steps,
            dump_propagator,
        } => commands::cmd_forecast(
            &model,
            &obs,
            &maps,
            &out,
            horizon,
            dump_propagator,
            window_steps,
        ),
        Command::Evaluate {
            model,
            obs,
            maps,
            protocol,
            out,
            dump_advection,
            ar_max_order,
        } => commands::cmd_evaluate(
            &model,
            &obs,
            &maps,
            &protocol,
            &out,
            dump_advection,
            ar_max_order,
        ),
        Command::Power {
            synth_train,
            synth_rows,
            train,
            forecasts,
            out,
            hub_height,
            draws,
            seed,
        } => commands::cmd_power(
            synth_train.as_deref(),
            synth_rows,
            train.as_deref(),
            forecasts.as_deref(),
            out.as_deref(),
            hub_height,
            draws,
            seed,
        ),
        Command::Gradcheck { seed } => commands::cmd_gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; anything else
            // is a usage error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ MideError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
