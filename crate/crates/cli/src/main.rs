use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flexsim::reference::Solver;
use flexsim_cli::selftest::{run_selftest, Fault};
use flexsim_cli::{cmd_bench, cmd_run, RunOverrides};

/// Variable-order Taylor simulation of switched power-electronic circuits.
/// Set FLEXSIM_LOG (error, warn, info, debug) for diagnostics.
#[derive(Parser)]
#[command(name = "flexsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write a CSV waveform plus a stats sidecar.
    Run {
        config: PathBuf,
        #[arg(long, value_parser = parse_solver)]
        solver: Option<Solver>,
        #[arg(long)]
        reltol: Option<f64>,
        #[arg(long)]
        abstol: Option<f64>,
        #[arg(long)]
        tend: Option<f64>,
        #[arg(long, default_value = "out.csv")]
        out: PathBuf,
    },
    /// Sweep tolerances for several solvers against a tight reference.
    Bench {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-3, 1e-4, 1e-5, 1e-6, 1e-7])]
        tolerances: Vec<f64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_solver, default_value = "taylor,dp45,bs23")]
        solvers: Vec<Solver>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Run the invariant battery and print a pass/fail table.
    Selftest {
        #[arg(long, hide = true, value_parser = parse_fault)]
        inject_fault: Option<Fault>,
    },
}

fn parse_solver(s: &str) -> Result<Solver, String> {
    Solver::parse(s).ok_or_else(|| format!("unknown solver {s:?} (taylor, dp45, bs23)"))
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    Fault::parse(s).ok_or_else(|| format!("unknown fault {s:?}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLEXSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, solver, reltol, abstol, tend, out } => {
            let ov = RunOverrides { solver, rel_tol: reltol, abs_tol: abstol, t_end: tend };
            cmd_run(&config, &ov, &out).map(|s| {
                println!("{}", serde_json::to_string(&s).expect("stats serialize"));
            })
        }
        Command::Bench { config, tolerances, solvers, out } => {
            cmd_bench(&config, &tolerances, &solvers, &out).map(|r| print!("{}", r.to_csv()))
        }
        Command::Selftest { inject_fault } => {
            let report = run_selftest(inject_fault);
            print!("{}", report.table());
            if report.all_passed() {
                Ok(())
            } else {
                return ExitCode::FAILURE;
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
