//! Consensus and leader-tracking errors plus run-level diagnostics.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::costs::{stage_cost, CostError, CostSpec, NeighborStates};
use crate::simulator::{LogRecord, TrajectoryLog};
use crate::topology::Topology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectory log is empty")]
    EmptyLog,
    #[error("leader error requested but no leader state is present")]
    MissingLeader,
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Stacked `δ_i = x_i - x_1` and the largest pairwise Euclidean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusError {
    pub delta: DVector<f64>,
    pub max_pairwise: f64,
}

pub fn consensus_error(states: &[DVector<f64>]) -> ConsensusError {
    let Some(first) = states.first() else {
        return ConsensusError {
            delta: DVector::zeros(0),
            max_pairwise: 0.0,
        };
    };
    let n = first.len();
    let mut delta = DVector::zeros(n * states.len());
    for (i, x) in states.iter().enumerate() {
        delta.rows_mut(i * n, n).copy_from(&(x - first));
    }
    let mut max_pairwise = 0.0f64;
    for (i, xi) in states.iter().enumerate() {
        for xj in &states[i + 1..] {
            max_pairwise = max_pairwise.max((xi - xj).norm());
        }
    }
    ConsensusError {
        delta,
        max_pairwise,
    }
}

/// `‖x_i - x_0‖` per follower.
pub fn leader_error(
    states: &[DVector<f64>],
    leader: Option<&DVector<f64>>,
) -> Result<Vec<f64>, MetricsError> {
    let leader = leader.ok_or(MetricsError::MissingLeader)?;
    Ok(states.iter().map(|x| (x - leader).norm()).collect())
}

/// Disagreement summary of one logged instant.
#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementReport {
    pub t: f64,
    pub delta: DVector<f64>,
    pub max_pairwise: f64,
    pub leader_error: Option<Vec<f64>>,
    /// Sum over agents of the predicted optimal cost.
    pub cost_estimate: f64,
}

impl DisagreementReport {
    pub fn from_record(record: &LogRecord) -> Self {
        let ConsensusError {
            delta,
            max_pairwise,
        } = consensus_error(&record.states);
        Self {
            t: record.t,
            delta,
            max_pairwise,
            leader_error: leader_error(&record.states, record.leader.as_ref()).ok(),
            cost_estimate: record.cost_estimates.iter().sum(),
        }
    }
}

/// Trapezoidal accumulation of each agent's stage cost along the realized
/// states and controls.
pub fn running_cost(
    log: &TrajectoryLog,
    spec: &CostSpec,
    topology: &Topology,
) -> Result<Vec<f64>, MetricsError> {
    let first = log.records.first().ok_or(MetricsError::EmptyLog)?;
    let stage = |r: &LogRecord| -> Result<Vec<f64>, MetricsError> {
        let states: NeighborStates = r.states.iter().cloned().enumerate().collect();
        (0..r.states.len())
            .map(|i| {
                Ok(stage_cost(
                    spec,
                    topology,
                    i,
                    &r.states[i],
                    &states,
                    &r.controls[i],
                )?)
            })
            .collect()
    };
    let mut totals = vec![0.0; first.states.len()];
    let mut previous = stage(first)?;
    for pair in log.records.windows(2) {
        let current = stage(&pair[1])?;
        let h = pair[1].t - pair[0].t;
        for (total, (a, b)) in totals.iter_mut().zip(previous.iter().zip(&current)) {
            *total += 0.5 * h * (a + b);
        }
        previous = current;
    }
    Ok(totals)
}

/// First time at which `series` drops to `fraction` of its first value and
/// stays there for the rest of the series.
pub fn settling_time(series: &[(f64, f64)], fraction: f64) -> Option<f64> {
    let &(_, initial) = series.first()?;
    let threshold = fraction * initial;
    let last_above = series.iter().rposition(|&(_, v)| v > threshold);
    match last_above {
        None => Some(series[0].0),
        Some(k) if k + 1 < series.len() => Some(series[k + 1].0),
        Some(_) => None,
    }
}

/// `(t, max pairwise distance)` for every record.
pub fn max_pairwise_series(log: &TrajectoryLog) -> Vec<(f64, f64)> {
    log.records
        .iter()
        .map(|r| (r.t, consensus_error(&r.states).max_pairwise))
        .collect()
}

/// `(t, max_i ‖x_i - x_0‖)` for every record; empty without a leader.
pub fn leader_error_series(log: &TrajectoryLog) -> Vec<(f64, f64)> {
    log.records
        .iter()
        .filter_map(|r| {
            let errors = leader_error(&r.states, r.leader.as_ref()).ok()?;
            Some((r.t, errors.into_iter().fold(0.0, f64::max)))
        })
        .collect()
}

/// `(t, max_i ‖P_i‖)` for every record.
pub fn residual_series(log: &TrajectoryLog) -> Vec<(f64, f64)> {
    log.records
        .iter()
        .map(|r| (r.t, r.residual_norms.iter().copied().fold(0.0, f64::max)))
        .collect()
}

/// `(t, Σ_i J*_i)` for every record.
pub fn cost_series(log: &TrajectoryLog) -> Vec<(f64, f64)> {
    log.records
        .iter()
        .map(|r| (r.t, r.cost_estimates.iter().sum()))
        .collect()
}

/// Largest control norm seen in the log.
pub fn peak_control(log: &TrajectoryLog) -> f64 {
    log.records
        .iter()
        .flat_map(|r| r.controls.iter().map(|u| u.norm()))
        .fold(0.0, f64::max)
}

/// Run-level summary written next to the trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_time: f64,
    pub records: usize,
    pub initial_max_pairwise: f64,
    pub final_max_pairwise: f64,
    pub time_to_10_percent: Option<f64>,
    pub time_to_1_percent: Option<f64>,
    pub initial_max_leader_error: Option<f64>,
    pub final_max_leader_error: Option<f64>,
    pub leader_time_to_10_percent: Option<f64>,
    pub leader_time_to_1_percent: Option<f64>,
    pub final_max_residual: f64,
    pub peak_control: f64,
}

impl RunSummary {
    pub fn from_log(log: &TrajectoryLog) -> Result<Self, MetricsError> {
        let last = log.last().ok_or(MetricsError::EmptyLog)?;
        let pairwise = max_pairwise_series(log);
        let leader = leader_error_series(log);
        let has_leader = !leader.is_empty();
        Ok(Self {
            final_time: last.t,
            records: log.records.len(),
            initial_max_pairwise: pairwise[0].1,
            final_max_pairwise: pairwise[pairwise.len() - 1].1,
            time_to_10_percent: settling_time(&pairwise, 0.1),
            time_to_1_percent: settling_time(&pairwise, 0.01),
            initial_max_leader_error: leader.first().map(|p| p.1),
            final_max_leader_error: leader.last().map(|p| p.1),
            leader_time_to_10_percent: has_leader.then(|| settling_time(&leader, 0.1)).flatten(),
            leader_time_to_1_percent: has_leader.then(|| settling_time(&leader, 0.01)).flatten(),
            final_max_residual: last.residual_norms.iter().copied().fold(0.0, f64::max),
            peak_control: peak_control(log),
        })
    }
}
