//! `spine-mpc`: runs a closed-loop spine experiment from a TOML config.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 when the run aborts or
//! fails after it started.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use config::{ControllerKind, ExperimentConfig};
use run::{run_experiment, Outcome, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "spine-mpc", version, about = "Closed-loop MPC experiments on a tensegrity spine model")]
struct Args {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    controller: Option<ControllerKind>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disturbance seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    disturbance: Option<Switch>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated sweep angles (rad); one run per angle, in parallel,
    /// each in `<out>/sweep_<angle>`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sweep: Option<Vec<f64>>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match resolve(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if args.print_config {
        print!("{}", cfg.resolved().to_toml());
        return ExitCode::SUCCESS;
    }
    match &args.sweep {
        Some(angles) => run_sweep(&cfg, angles),
        None => ExitCode::from(report(run_experiment(&cfg))),
    }
}

/// Config file with command-line overrides applied.
fn resolve(args: &Args) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(kind) = args.controller {
        cfg.controller.kind = kind;
    }
    if let Some(out) = &args.out {
        cfg.run.out = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.disturbance.seed = seed;
    }
    if let Some(d) = args.disturbance {
        cfg.disturbance.enabled = d == Switch::On;
    }
    if let Some(steps) = args.steps {
        cfg.run.steps = Some(steps);
    }
    Ok(cfg)
}

fn report(result: Result<Outcome, RunError>) -> u8 {
    match result {
        Ok(Outcome::Completed) => 0,
        Ok(Outcome::Aborted(reason)) => {
            eprintln!("run aborted: {reason}");
            2
        }
        Err(RunError::Invalid(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(RunError::Failed(e)) => {
            eprintln!("run failed: {e:#}");
            2
        }
    }
}

fn run_sweep(base: &ExperimentConfig, angles: &[f64]) -> ExitCode {
    let codes: Vec<u8> = std::thread::scope(|scope| {
        let handles: Vec<_> = angles
            .iter()
            .map(|&angle| {
                let mut cfg = base.clone();
                cfg.trajectory.sweep = angle;
                cfg.run.out = base.run.out.join(format!("sweep_{angle}"));
                scope.spawn(move || report(run_experiment(&cfg)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or(2)).collect()
    });
    ExitCode::from(codes.into_iter().max().unwrap_or(0))
}
