//! Command-line front end of the experiment harness.
//!
//! Subcommands: `simulate` (Monte Carlo batch → JSON report, optional CSV
//! trajectories), `sweep` (kernel-parameter grid → long-format CSV),
//! `bounds` (convergence-bound certificate → JSON), and `fit-gaussian`
//! (least-squares Gaussian fit of a noise density → JSON).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmkmckf::harness::{
    bounds_report, parameter_sweep, run_monte_carlo, simulate_with_trace, sweep_csv,
    write_run_csv, ExperimentConfig,
};
use gmkmckf::noise::{default_fit_grid, fit_gaussian_mse, NoiseSpec};
use gmkmckf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gmkmckf",
    version,
    about = "Robust state-and-disturbance estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo batch and print the aggregate JSON report.
    Simulate(SimulateArgs),
    /// Rerun the batch over an (alpha, beta1) grid; print long-format CSV.
    Sweep(SweepArgs),
    /// Evaluate the fixed-point convergence certificate for the experiment.
    Bounds(BoundsArgs),
    /// Fit a Gaussian density to a noise spec by least squares.
    FitGaussian(FitGaussianArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured Monte Carlo run count.
    #[arg(long)]
    runs: Option<usize>,
    /// Override the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `report.json` plus one `run_NNNN.csv` per run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep per-observer wall-time in the report (the output is then no
    /// longer byte-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment configuration file (JSON); its first gmkmckf observer is
    /// the sweep template.
    #[arg(long)]
    config: PathBuf,
    /// Kernel-shape grid `start:stop:step` (inclusive).
    #[arg(long)]
    alpha: String,
    /// Disturbance-bandwidth grid `start:stop:step` (inclusive).
    #[arg(long)]
    beta1: String,
    /// Override the configured Monte Carlo run count (reduced M).
    #[arg(long)]
    runs: Option<usize>,
    /// Override the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `sweep.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Residual-ball radius γ (default: 2ξ of the nominal regression).
    #[arg(long)]
    gamma: Option<f64>,
    /// Contraction modulus η in (0, 1) (default 0.5).
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct FitGaussianArgs {
    /// Noise spec file (JSON), e.g. a mixture to approximate.
    #[arg(long)]
    spec: PathBuf,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses an inclusive `start:stop:step` grid. The right endpoint is kept
/// when it lands within a relative `1e-9` of a grid point.
fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(Error::InvalidConfig(format!(
            "grid must be start:stop:step, got {s:?}"
        )));
    };
    let parse = |v: &str| -> Result<f64> {
        v.parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("not a number in grid: {v:?}")))
    };
    let (a0, a1, da) = (parse(start)?, parse(stop)?, parse(step)?);
    if !(a0.is_finite() && a1.is_finite() && da.is_finite() && da > 0.0 && a1 >= a0) {
        return Err(Error::InvalidConfig(format!(
            "grid needs finite start <= stop and step > 0, got {s:?}"
        )));
    }
    let mut grid = Vec::new();
    let mut k = 0u32;
    loop {
        let x = a0 + f64::from(k) * da;
        if x > a1 + 1e-9 * da {
            break;
        }
        grid.push(x);
        k += 1;
        if k > 1_000_000 {
            return Err(Error::InvalidConfig("grid has more than 10^6 points".into()));
        }
    }
    Ok(grid)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let mut report = run_monte_carlo(&cfg)?;
    if !args.timing {
        report.strip_timing();
    }
    let json = report.to_json()?;
    print!("{json}");

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), &json)?;
        for r in 0..cfg.runs {
            let trace = simulate_with_trace(&cfg, r)?;
            write_run_csv(&dir.join(format!("run_{r:04}.csv")), &trace)?;
        }
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let alpha_grid = parse_grid(&args.alpha)?;
    let beta1_grid = parse_grid(&args.beta1)?;
    let cells = parameter_sweep(&cfg, &alpha_grid, &beta1_grid)?;
    let csv = sweep_csv(&cells);
    print!("{csv}");

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_bounds(args: BoundsArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let report = bounds_report(&cfg, args.gamma, args.eta)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_fit_gaussian(args: FitGaussianArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec)?;
    let spec: NoiseSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    let fit = fit_gaussian_mse(&spec, &default_fit_grid())?;
    println!("{}", serde_json::to_string_pretty(&fit)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::FitGaussian(args) => cmd_fit_gaussian(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
