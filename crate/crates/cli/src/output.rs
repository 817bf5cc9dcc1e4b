//! Waveform CSV and run-statistics sidecar files.

use std::path::{Path, PathBuf};

use flexsim::integrator::RunStats;
use flexsim::waveform::Waveform;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed waveform ({message})")]
    Malformed { path: String, message: String },
}

/// Shortest representation that still round-trips: 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_waveform_to<W: std::io::Write>(w: &Waveform<f64>, sink: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(sink);
    let mut header = vec!["time".to_string()];
    header.extend(w.names.iter().cloned());
    out.write_record(&header)?;
    for i in 0..w.len() {
        let mut row = vec![format_value(w.time[i])];
        row.extend(w.columns.iter().map(|c| format_value(c[i])));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_waveform(w: &Waveform<f64>, path: &Path) -> Result<(), OutputError> {
    let file = std::fs::File::create(path).map_err(|source| OutputError::Io { path: path.display().to_string(), source })?;
    write_waveform_to(w, file).map_err(|source| OutputError::Csv { path: path.display().to_string(), source })
}

pub fn read_waveform_from<R: std::io::Read>(source: R, label: &str) -> Result<Waveform<f64>, OutputError> {
    let malformed = |m: String| OutputError::Malformed { path: label.to_string(), message: m };
    let mut rd = csv::Reader::from_reader(source);
    let header = rd.headers().map_err(|source| OutputError::Csv { path: label.to_string(), source })?.clone();
    if header.get(0) != Some("time") {
        return Err(malformed("first column must be time".into()));
    }
    let mut w = Waveform::new(header.iter().skip(1).map(str::to_string).collect());
    for rec in rd.records() {
        let rec = rec.map_err(|source| OutputError::Csv { path: label.to_string(), source })?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| malformed(format!("{s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        w.push(vals[0], &vals[1..]);
    }
    Ok(w)
}

pub fn read_waveform(path: &Path) -> Result<Waveform<f64>, OutputError> {
    let file = std::fs::File::open(path).map_err(|source| OutputError::Io { path: path.display().to_string(), source })?;
    read_waveform_from(file, &path.display().to_string())
}

/// `out.csv` → `out.stats.json`.
pub fn stats_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("stats.json")
}

#[derive(Serialize)]
struct StatsFile<'a> {
    scenario: &'a str,
    #[serde(flatten)]
    stats: &'a RunStats,
    max_event_state_jump: f64,
    max_event_loop_residual: f64,
}

pub fn write_stats(path: &Path, scenario: &str, stats: &RunStats) -> Result<(), OutputError> {
    let max = |f: fn(&flexsim::integrator::EventRecord) -> f64| stats.event_log.iter().map(f).fold(0.0, f64::max);
    let doc = StatsFile {
        scenario,
        stats,
        max_event_state_jump: max(|e| e.state_jump),
        max_event_loop_residual: max(|e| e.loop_residual),
    };
    let text = serde_json::to_string_pretty(&doc).expect("stats serialize");
    std::fs::write(path, text).map_err(|source| OutputError::Io { path: path.display().to_string(), source })
}
