//! Command-line front end: solve a scenario, simulate a stored solution,
//! re-check its invariants, or recompute its costs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tracersteer::artifacts::{run_check, run_cost, run_simulate, run_solve};
use tracersteer::config::parse_config;
use tracersteer::Error;

#[derive(Parser)]
#[command(name = "tracersteer", version, about = "Gain-schedule recovery for linear Gaussian ensemble flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario and write solution artifacts.
    Solve {
        /// Scenario configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the scenario's output.directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo simulation of a stored solution.
    Simulate {
        /// Solution directory written by solve.
        #[arg(long)]
        solution: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-validate a stored solution against its scenario.
    Check {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute the costs of a stored solution.
    Cost {
        #[arg(long)]
        solution: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NoConvergence { .. } => 2,
        Error::InfeasibleSurface { .. } => 3,
        Error::FileFormat(_) => 4,
        Error::CheckFailed(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Solve { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let scenario = parse_config(&text)?;
            let base_dir = config
                .parent()
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            let out_dir = out.unwrap_or_else(|| scenario.output_directory.clone());
            let solution = run_solve(&scenario, &base_dir, &out_dir)?;
            println!(
                "converged={} iterations={} residual={:.3e}",
                solution.converged, solution.iterations, solution.residual_norm
            );
            println!(
                "J_KE={:.8} J_A={:.8} total={:.8}",
                solution.j_ke,
                solution.j_a,
                solution.total_cost()
            );
            println!("Phi_1={:?}", solution.terminal_phi().as_slice());
            println!("artifacts written to {}", out_dir.display());
            Ok(())
        }
        Command::Simulate {
            solution,
            particles,
            seed,
        } => {
            let report = run_simulate(&solution, particles, seed)?;
            for (k, t) in report.checkpoints.iter().enumerate() {
                println!(
                    "t={t:.2} relative covariance error {:.4e}",
                    report.cov_error_rel[k]
                );
            }
            if !report.tracer_endpoint_error.is_nan() {
                println!(
                    "tracer endpoint error {:.4e}",
                    report.tracer_endpoint_error
                );
            }
            println!("wall time {:.3}s", report.wall_time_secs);
            Ok(())
        }
        Command::Check { solution, config } => {
            let text = std::fs::read_to_string(&config)?;
            let scenario = parse_config(&text)?;
            let base_dir = config
                .parent()
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            let items = run_check(&solution, &scenario, &base_dir)?;
            for item in &items {
                println!(
                    "{} {} ({})",
                    if item.passed { "PASS" } else { "FAIL" },
                    item.name,
                    item.detail
                );
            }
            Ok(())
        }
        Command::Cost { solution } => {
            let (ke, ja, total) = run_cost(&solution)?;
            println!("J_KE={ke:.8} J_A={ja:.8} total={total:.8}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let filter = std::env::var("TRACERSTEER_LOG").unwrap_or_else(|_| "error".into());
    env_logger::Builder::new().parse_filters(&filter).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let Error::CheckFailed(failures) = &err {
                for f in failures {
                    eprintln!("  failed: {f}");
                }
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
