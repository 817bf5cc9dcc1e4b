//! Scenario loading, run and bench commands, and the self-test battery
//! behind the `flexsim` binary.

pub mod output;
pub mod scenario;
pub mod selftest;

use std::path::{Path, PathBuf};

use flexsim::integrator::{IntegrateError, RunStats};
use flexsim::reference::{bench, BenchReport, Solver};
use flexsim::waveform::Waveform;
use thiserror::Error;

pub use scenario::{load_scenario, parse_scenario, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("solver failed: {0}")]
    Solver(#[from] IntegrateError),
    #[error(transparent)]
    Output(#[from] output::OutputError),
    #[error("{0}")]
    Usage(String),
}

/// Overrides applied on top of a scenario's solver settings.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub solver: Option<Solver>,
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub t_end: Option<f64>,
}

impl RunOverrides {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(s) = self.solver {
            sc.solver.solver = s.name().to_string();
        }
        if let Some(r) = self.rel_tol {
            sc.solver.rel_tol = r;
        }
        if let Some(a) = self.abs_tol {
            sc.solver.abs_tol = a;
        }
        if let Some(t) = self.t_end {
            sc.t_span[1] = t;
        }
    }
}

/// Loads, overrides and simulates a scenario.
pub fn simulate(path: &Path, overrides: &RunOverrides) -> Result<(Scenario, Waveform<f64>, RunStats), CliError> {
    let mut sc = load_scenario(path)?;
    overrides.apply(&mut sc);
    let built = sc.build()?;
    let (w, stats) = built.solver.run(&built.run)?;
    Ok((sc, w, stats))
}

/// Writes `out` (CSV) and its `.stats.json` sidecar.
pub fn cmd_run(path: &Path, overrides: &RunOverrides, out: &Path) -> Result<RunStats, CliError> {
    let (sc, w, stats) = simulate(path, overrides)?;
    output::write_waveform(&w, out)?;
    output::write_stats(&output::stats_path(out), &sc.name, &stats)?;
    log::info!(
        "{}: {} steps ({} rejected), {} f-evals, average order {:.2}",
        stats.solver,
        stats.accepted_steps,
        stats.rejected_steps,
        stats.f_evals,
        stats.average_order
    );
    Ok(stats)
}

/// Tolerance sweep; writes `<out>.json` and `<out>.csv`.
pub fn cmd_bench(path: &Path, tolerances: &[f64], solvers: &[Solver], out: &Path) -> Result<BenchReport, CliError> {
    if tolerances.is_empty() || solvers.is_empty() {
        return Err(CliError::Usage("bench needs at least one tolerance and one solver".into()));
    }
    let sc = load_scenario(path)?;
    let built = sc.build()?;
    let report = bench(&built.run, tolerances, solvers, None)?;
    let write = |p: PathBuf, text: String| {
        std::fs::write(&p, text).map_err(|source| output::OutputError::Io { path: p.display().to_string(), source })
    };
    write(out.with_extension("json"), report.to_json())?;
    write(out.with_extension("csv"), report.to_csv())?;
    Ok(report)
}
