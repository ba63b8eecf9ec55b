use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use covshape::harness::{self, Fault, ValidateOptions};
use covshape::optimizer::{optimize_groups, InitialVectors, OptimizerSettings};
use covshape::{path_covariance, ExperimentConfig, PilotMode, ScenarioFile};
use serde_json::json;

#[derive(Parser)]
#[command(name = "covshape", version, about = "Covariance shaping for massive-MIMO downlink")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep described by a JSON config and write CSV plus a JSON sidecar.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Worker threads; defaults to all cores.
        #[arg(long, env = "COVSHAPE_THREADS")]
        threads: Option<usize>,
    },
    /// Optimize shaping vectors for a scenario and print them as JSON.
    Optimize {
        /// Scenario file, or `bundled:<name>`.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        max_iterations: usize,
        /// Start from random vectors drawn with this seed instead of the
        /// dominant receive eigenvectors.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate channels by Monte Carlo and print per-UE NMSE as CSV.
    Estimate {
        #[arg(long)]
        scenario: String,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        tau: Option<usize>,
        /// Pilot groups; defaults to half the UEs, rounded up.
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// UE transmit powers in dBm; defaults to the scenario value.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        rho_ue: Vec<f64>,
    },
    /// Run the built-in invariant checks and print a report.
    Validate {
        #[arg(long, default_value = "bundled:nlos_2ue")]
        scenario: String,
        #[arg(long, value_enum)]
        inject: Option<FaultArg>,
        #[arg(long, default_value_t = 20_000)]
        moment_trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Effective,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Kronecker,
    NonHermitian,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, threads } => {
            if threads == Some(0) {
                bail!("--threads must be at least 1");
            }
            let cfg = ExperimentConfig::load(&config)?;
            let records = harness::run_sweep(&cfg, threads)?;
            harness::write_outputs(&cfg, &records, &out)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Optimize { scenario, eps, alpha, max_iterations, seed } => {
            let file = harness::load_scenario(&scenario, None)?;
            let sc = file.to_scenario()?;
            let sigmas = (0..sc.num_ues()).map(|u| path_covariance(&sc, u)).collect::<covshape::Result<Vec<_>>>()?;
            let settings = OptimizerSettings {
                accuracy: eps,
                step_size: alpha,
                max_iterations,
                initial: seed.map_or(InitialVectors::DominantEigen, |seed| InitialVectors::Random { seed }),
                ..Default::default()
            };
            settings.validate()?;
            let (vectors, reports) = optimize_groups(&sigmas, &sc.shaping_groups, &settings)?;
            let doc = json!({
                "scenario": scenario,
                "vectors": vectors.iter().map(|v| v.coefficients().iter().map(|z| [z.re, z.im]).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "groups": sc.shaping_groups,
                "reports": reports.iter().map(|r| json!({
                    "objective_trace": r.objective_trace,
                    "iterations": r.iterations,
                    "converged": r.converged,
                })).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Command::Estimate { scenario, mode, tau, p, trials, seed, rho_ue } => {
            let file: ScenarioFile = harness::load_scenario(&scenario, None)?;
            let grid = if rho_ue.is_empty() { vec![file.powers.rho_ue_dbm] } else { rho_ue };
            let mode = match mode {
                ModeArg::Full => PilotMode::Full,
                ModeArg::Effective => PilotMode::Effective,
            };
            let rows = harness::nmse_sweep(&file, mode, p, tau, &grid, trials, seed, &OptimizerSettings::default())?;
            print!("{}", harness::nmse_rows_to_csv(&rows));
        }
        Command::Validate { scenario, inject, moment_trials, seed, json } => {
            let options = ValidateOptions {
                scenario,
                moment_trials,
                seed,
                inject: inject.map(|f| match f {
                    FaultArg::Kronecker => Fault::Kronecker,
                    FaultArg::NonHermitian => Fault::NonHermitian,
                }),
                ..Default::default()
            };
            let report = harness::validate(&options).context("validation setup failed")?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for c in &report.checks {
                    let tag = if c.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {:<45} measured {:.3e} (tol {:.1e})  {}", c.name, c.measured, c.tolerance, c.detail);
                }
            }
            if !report.all_passed() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
