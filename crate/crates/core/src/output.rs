//! CSV and JSON artifacts of a run.
//!
//! Everything is formatted with a fixed number of digits, so repeated runs
//! of the same scenario produce identical bytes.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{consensus_error, MetricsError, RunSummary};
use crate::scenario::Scenario;
use crate::simulator::TrajectoryLog;

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How the run ended, echoed in the summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Diverged { error: String },
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    scenario: &'a Scenario,
    #[serde(flatten)]
    outcome: &'a Outcome,
    metrics: RunSummary,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(
    path: &Path,
    fill: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    fill(&mut w).and_then(|()| w.flush()).map_err(io_err(path))
}

fn trajectory_header(n: usize) -> String {
    let xs = (1..=n).map(|k| format!("x{k}"));
    let us = (1..=n).map(|k| format!("u{k}"));
    std::iter::once("t".to_string())
        .chain(std::iter::once("agent".to_string()))
        .chain(xs)
        .chain(us)
        .collect::<Vec<_>>()
        .join(",")
}

fn write_row<'a>(
    w: &mut impl Write,
    t: f64,
    agent: usize,
    values: impl Iterator<Item = &'a f64>,
) -> io::Result<()> {
    write!(w, "{t:.10},{agent}")?;
    for v in values {
        write!(w, ",{v:.10}")?;
    }
    writeln!(w)
}

/// Writes the trajectory, diagnostics and summary files into `out_dir`.
///
/// Agents are numbered from 1; the leader, when present, is agent 0 with a
/// zero control.
pub fn write_outputs(
    scenario: &Scenario,
    log: &TrajectoryLog,
    outcome: &Outcome,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, OutputError> {
    let metrics = RunSummary::from_log(log)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let n = log.records[0].states.first().map_or(0, |x| x.len());
    let zeros = vec![0.0; n];

    let trajectories = out_dir.join(TRAJECTORIES);
    write_file(&trajectories, |w| {
        writeln!(w, "{}", trajectory_header(n))?;
        for r in &log.records {
            if let Some(leader) = &r.leader {
                write_row(w, r.t, 0, leader.iter().chain(&zeros))?;
            }
            for (i, (x, u)) in r.states.iter().zip(&r.controls).enumerate() {
                write_row(w, r.t, i + 1, x.iter().chain(u.iter()))?;
            }
        }
        Ok(())
    })?;

    let diagnostics = out_dir.join(DIAGNOSTICS);
    write_file(&diagnostics, |w| {
        writeln!(w, "t,agent,residual_norm,max_pairwise")?;
        for r in &log.records {
            let pairwise = consensus_error(&r.states).max_pairwise;
            for (i, p) in r.residual_norms.iter().enumerate() {
                writeln!(w, "{:.10},{},{p:.10e},{pairwise:.10e}", r.t, i + 1)?;
            }
        }
        Ok(())
    })?;

    let summary = out_dir.join(SUMMARY);
    let doc = SummaryFile {
        scenario,
        outcome,
        metrics,
    };
    write_file(&summary, |w| {
        serde_json::to_writer_pretty(&mut *w, &doc)?;
        writeln!(w)
    })?;

    Ok(vec![trajectories, diagnostics, summary])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lists_states_then_controls() {
        assert_eq!(trajectory_header(3), "t,agent,x1,x2,x3,u1,u2,u3");
    }

    #[test]
    fn rows_use_fixed_decimals() {
        let mut buf = Vec::new();
        write_row(&mut buf, 0.01, 2, [1.0, -0.5].iter()).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "0.0100000000,2,1.0000000000,-0.5000000000\n"
        );
    }

    #[test]
    fn empty_log_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = crate::scenario::preset("lu4").unwrap();
        let err = write_outputs(
            &s,
            &TrajectoryLog::default(),
            &Outcome::Completed,
            dir.path(),
        );
        assert!(matches!(
            err,
            Err(OutputError::Metrics(MetricsError::EmptyLog))
        ));
    }
}
