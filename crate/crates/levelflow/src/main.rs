use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use levelflow::config::{parse_scenario, validate, Overrides, ScenarioConfig};
use levelflow::runner::{self, RunError, RunOptions};
use levelflow::scenarios;

#[derive(Parser)]
#[command(
    name = "levelflow",
    about = "Two-phase incompressible flow with an adaptively transported interface",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to its final time, writing metrics and snapshots.
    Run {
        /// Path to a scenario file, or the name of a built-in scenario.
        scenario: String,
        /// Output directory (falls back to LEVELFLOW_OUT, then `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the final time.
        #[arg(long = "t-final")]
        t_final: Option<f64>,
        /// Override the step-size cap.
        #[arg(long = "dt-max")]
        dt_max: Option<f64>,
        /// Override the snapshot cadence (steps between snapshots).
        #[arg(long)]
        every: Option<usize>,
    },
    /// Run a combined mesh-and-step refinement study of a transport scenario.
    Study {
        /// Path to a scenario file, or the name of a built-in scenario.
        scenario: String,
        /// Number of rungs; each halves the cell size and the step.
        #[arg(long)]
        ladder: usize,
    },
    /// List the built-in scenario names.
    ListScenarios,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_scenario(arg: &str) -> Result<ScenarioConfig, String> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg).map_err(|e| format!("cannot read `{arg}`: {e}"))?
    } else if let Some(builtin) = scenarios::builtin(arg) {
        builtin.to_string()
    } else {
        return Err(format!(
            "`{arg}` is neither a file nor a built-in scenario (see `levelflow list-scenarios`)"
        ));
    };
    let cfg = parse_scenario(&text).map_err(|e| e.to_string())?;
    validate(&cfg).map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// LEVELFLOW_THREADS is accepted and validated for forward compatibility;
/// this build always runs on one thread.
fn check_threads_env() -> Result<(), String> {
    match std::env::var("LEVELFLOW_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("LEVELFLOW_THREADS must be a positive integer, got `{v}`")),
        },
    }
}

fn resolve_out_dir(flag: Option<PathBuf>, cfg: &ScenarioConfig) -> PathBuf {
    flag.or_else(|| std::env::var("LEVELFLOW_OUT").ok().map(PathBuf::from))
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = check_threads_env() {
        return fail(EXIT_CONFIG, msg);
    }
    match cli.cmd {
        Command::Run { scenario, out, t_final, dt_max, every } => {
            let mut cfg = match load_scenario(&scenario) {
                Ok(c) => c,
                Err(msg) => return fail(EXIT_CONFIG, msg),
            };
            Overrides { t_final, dt_max, every, out_dir: None }.apply(&mut cfg);
            let out_dir = resolve_out_dir(out, &cfg);
            let opts = RunOptions { out_dir: Some(out_dir.clone()) };
            match runner::run(&cfg, &opts) {
                Ok(result) => {
                    let last_t = result.rows.last().map_or(0.0, |r| r.t);
                    println!(
                        "completed {} steps to t = {:.6e}; outputs in {}",
                        result.rows.len(),
                        last_t,
                        out_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e @ (RunError::Solver { .. } | RunError::StepCollapse { .. })) => {
                    eprintln!("last good state and metrics saved in {}", out_dir.display());
                    fail(EXIT_SOLVER, e)
                }
                Err(e @ RunError::Unsupported(_)) => fail(EXIT_CONFIG, e),
                Err(e) => fail(1, e),
            }
        }
        Command::Study { scenario, ladder } => {
            let cfg = match load_scenario(&scenario) {
                Ok(c) => c,
                Err(msg) => return fail(EXIT_CONFIG, msg),
            };
            if ladder == 0 {
                return fail(EXIT_CONFIG, "--ladder must be at least 1");
            }
            match runner::convergence_study(&cfg, ladder) {
                Ok(table) => {
                    print!("{table}");
                    ExitCode::SUCCESS
                }
                Err(e @ RunError::Unsupported(_)) => fail(EXIT_CONFIG, e),
                Err(e @ (RunError::Solver { .. } | RunError::StepCollapse { .. })) => {
                    fail(EXIT_SOLVER, e)
                }
                Err(e) => fail(1, e),
            }
        }
        Command::ListScenarios => {
            for name in scenarios::names() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
    }
}
