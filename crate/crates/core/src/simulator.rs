//! Closed-loop engine on the real time axis.
//!
//! Every step is bulk-synchronous: agents snapshot their neighbors once,
//! solve their horizon problems independently (in parallel), and only then
//! do all plants advance together under a zero-order hold on the control.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costs::{CostError, CostSpec, Coupling, HorizonSchedule, NeighborStates};
use crate::dynamics::DynamicsModel;
use crate::ode::rk4_step;
use crate::sweep::{costate_time_update, solve_stage, SolveSettings, Stabilization};
use crate::topology::Topology;
use crate::tpbvp::{optimal_control, terminal_costate, AgentProblem, Prediction, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("agent {} diverged at t = {t:.4}", .agent + 1)]
    Divergence {
        agent: usize,
        t: f64,
        #[source]
        source: SolverError,
    },
    #[error("plant state diverged at t = {t:.4}")]
    PlantDivergence { t: f64 },
    #[error("invalid initial state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Step sizes and prediction modes of a closed-loop run.
///
/// Missing fields in a scenario file take their default values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub dtau_target: f64,
    pub duration: f64,
    /// Reserved for randomized scenarios; nothing consumes it yet.
    pub seed: u64,
    pub neighbor_prediction: Prediction,
    pub leader_prediction: Prediction,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            dtau_target: 0.005,
            duration: 10.0,
            seed: 0,
            neighbor_prediction: Prediction::OpenLoop,
            leader_prediction: Prediction::OpenLoop,
        }
    }
}

impl SimulationConfig {
    /// Number of real-axis steps covering the duration.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub t: f64,
    pub agent_states: Vec<DVector<f64>>,
    pub leader_state: Option<DVector<f64>>,
    pub costates: Vec<DVector<f64>>,
    pub last_controls: Vec<DVector<f64>>,
}

/// Solver health at the start of a step, one entry per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    pub horizon: f64,
    pub residual_norms: Vec<f64>,
    pub cost_estimates: Vec<f64>,
}

/// One logged instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub leader: Option<DVector<f64>>,
    pub horizon: f64,
    pub residual_norms: Vec<f64>,
    pub cost_estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub records: Vec<LogRecord>,
}

impl TrajectoryLog {
    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// A run that stopped early; the log holds every completed record.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("run aborted after {} records", .partial.records.len())]
pub struct Aborted {
    #[source]
    pub error: SimulationError,
    pub partial: TrajectoryLog,
}

/// The networked closed loop: shared model, graph and weights.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub model: Arc<dyn DynamicsModel>,
    pub topology: Topology,
    pub costs: CostSpec,
    pub schedule: HorizonSchedule,
    pub stabilization: Stabilization,
    pub config: SimulationConfig,
}

impl Simulator {
    fn problem(&self) -> AgentProblem<'_> {
        AgentProblem::new(self.model.as_ref(), &self.costs).with_prediction(
            self.config.neighbor_prediction,
            self.config.leader_prediction,
        )
    }

    fn settings(&self) -> SolveSettings<'_> {
        SolveSettings {
            schedule: self.schedule,
            stabilization: &self.stabilization,
            dtau_target: self.config.dtau_target,
        }
    }

    /// States at `t = 0` with `Λ_i(0) = φ_x(x_i(0))`, which makes the
    /// residual vanish for the zero-length initial horizon.
    pub fn initialize(
        &self,
        agent_states: Vec<DVector<f64>>,
        leader_state: Option<DVector<f64>>,
    ) -> Result<SimulationState, SimulationError> {
        let n = self.model.state_dim();
        if agent_states.len() != self.topology.n_agents() {
            return Err(SimulationError::InvalidState(format!(
                "{} initial states for {} agents",
                agent_states.len(),
                self.topology.n_agents()
            )));
        }
        for x in agent_states.iter().chain(leader_state.iter()) {
            if x.len() != n || x.iter().any(|v| !v.is_finite()) {
                return Err(SimulationError::InvalidState(format!(
                    "initial state {x:?} is not a finite {n}-vector"
                )));
            }
        }
        let mut state = SimulationState {
            t: 0.0,
            agent_states,
            leader_state,
            costates: Vec::new(),
            last_controls: Vec::new(),
        };
        let couplings = snapshot_neighbors(&state, &self.topology, &self.costs)?;
        state.costates = state
            .agent_states
            .iter()
            .zip(&couplings)
            .map(|(x, c)| terminal_costate(&self.costs, x, c))
            .collect();
        state.last_controls = state
            .costates
            .iter()
            .map(|l| optimal_control(&self.costs, l))
            .collect();
        Ok(state)
    }

    /// Evaluates the horizon problem of every agent without advancing.
    pub fn diagnose(&self, state: &SimulationState) -> Result<StepDiagnostics, SimulationError> {
        let couplings = snapshot_neighbors(state, &self.topology, &self.costs)?;
        let problem = self.problem();
        let settings = self.settings();
        let solutions = (0..state.agent_states.len())
            .into_par_iter()
            .map(|i| {
                let u = optimal_control(&self.costs, &state.costates[i]);
                solve_stage(
                    &problem,
                    &settings,
                    state.t,
                    &state.agent_states[i],
                    &state.costates[i],
                    &couplings[i],
                    &u,
                )
                .map_err(|source| SimulationError::Divergence {
                    agent: i,
                    t: state.t,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StepDiagnostics {
            t: state.t,
            horizon: solutions.first().map_or(0.0, |s| s.horizon),
            residual_norms: solutions.iter().map(|s| s.residual_norm()).collect(),
            cost_estimates: solutions
                .iter()
                .map(|s| s.grid.cost_estimate(&problem))
                .collect(),
        })
    }

    /// Advances the closed loop from `t` to `t + dt`. Diagnostics describe
    /// the solve at `t`.
    pub fn step(
        &self,
        state: &SimulationState,
        step_index: usize,
    ) -> Result<(SimulationState, StepDiagnostics), SimulationError> {
        let dt = self.config.dt;
        let couplings = snapshot_neighbors(state, &self.topology, &self.costs)?;
        let problem = self.problem();
        let settings = self.settings();
        let updates = (0..state.agent_states.len())
            .into_par_iter()
            .map(|i| {
                costate_time_update(
                    &problem,
                    &settings,
                    state.t,
                    dt,
                    &state.agent_states[i],
                    &state.costates[i],
                    &couplings[i],
                )
                .map_err(|source| SimulationError::Divergence {
                    agent: i,
                    t: state.t,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let controls: Vec<DVector<f64>> = state
            .costates
            .iter()
            .map(|l| optimal_control(&self.costs, l))
            .collect();
        let next_t = (step_index + 1) as f64 * dt;
        let agent_states: Vec<DVector<f64>> = state
            .agent_states
            .iter()
            .zip(&controls)
            .map(|(x, u)| advance_plant(self.model.as_ref(), x, Some(u), dt))
            .collect();
        let leader_state = state
            .leader_state
            .as_ref()
            .map(|x0| advance_plant(self.model.as_ref(), x0, None, dt));
        if agent_states
            .iter()
            .chain(leader_state.iter())
            .any(|x| x.iter().any(|v| !v.is_finite()))
        {
            return Err(SimulationError::PlantDivergence { t: next_t });
        }

        let diagnostics = StepDiagnostics {
            t: state.t,
            horizon: updates.first().map_or(0.0, |u| u.initial.horizon),
            residual_norms: updates.iter().map(|u| u.initial.residual_norm()).collect(),
            cost_estimates: updates
                .iter()
                .map(|u| u.initial.grid.cost_estimate(&problem))
                .collect(),
        };
        let next = SimulationState {
            t: next_t,
            agent_states,
            leader_state,
            costates: updates.into_iter().map(|u| u.costate).collect(),
            last_controls: controls,
        };
        Ok((next, diagnostics))
    }

    /// Runs from the given initial condition for the configured duration.
    pub fn run(
        &self,
        agent_states: Vec<DVector<f64>>,
        leader_state: Option<DVector<f64>>,
    ) -> Result<TrajectoryLog, Aborted> {
        let mut log = TrajectoryLog::default();
        let abort = |error, log: &TrajectoryLog| Aborted {
            error,
            partial: log.clone(),
        };
        let mut state = self
            .initialize(agent_states, leader_state)
            .map_err(|e| abort(e, &log))?;
        for k in 0..self.config.steps() {
            let (next, diagnostics) = self.step(&state, k).map_err(|e| abort(e, &log))?;
            log.records.push(self.record(&state, diagnostics));
            state = next;
        }
        let diagnostics = self.diagnose(&state).map_err(|e| abort(e, &log))?;
        log.records.push(self.record(&state, diagnostics));
        Ok(log)
    }

    fn record(&self, state: &SimulationState, diagnostics: StepDiagnostics) -> LogRecord {
        LogRecord {
            t: state.t,
            states: state.agent_states.clone(),
            controls: state
                .costates
                .iter()
                .map(|l| optimal_control(&self.costs, l))
                .collect(),
            leader: state.leader_state.clone(),
            horizon: diagnostics.horizon,
            residual_norms: diagnostics.residual_norms,
            cost_estimates: diagnostics.cost_estimates,
        }
    }
}

/// One RK4 step of `ẋ = F(x) + u` with `u` held over the step; the leader
/// (no control) follows `ẋ = F(x)`.
pub fn advance_plant(
    model: &dyn DynamicsModel,
    x: &DVector<f64>,
    u: Option<&DVector<f64>>,
    dt: f64,
) -> DVector<f64> {
    match u {
        Some(u) => rk4_step(|_, x| model.field(x) + u, 0.0, x, dt),
        None => rk4_step(|_, x| model.field(x), 0.0, x, dt),
    }
}

/// Captures, once per step, the states each agent receives from its
/// neighbors (and the leader, when pinned). The copies are immune to later
/// changes of the live state.
pub fn snapshot_neighbors(
    state: &SimulationState,
    topology: &Topology,
    costs: &CostSpec,
) -> Result<Vec<Coupling>, CostError> {
    let all: NeighborStates = state.agent_states.iter().cloned().enumerate().collect();
    (0..topology.n_agents())
        .map(|i| Coupling::gather(costs, topology, i, &all, state.leader_state.as_ref()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::lorenz;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn simulator(adjacency: DMatrix<f64>, costs: CostSpec, duration: f64) -> Simulator {
        Simulator {
            model: Arc::new(lorenz()),
            topology: Topology::new(adjacency, None, true).unwrap(),
            costs,
            schedule: HorizonSchedule::new(1.0, 0.01).unwrap(),
            stabilization: Stabilization::scalar(-50.0, 3).unwrap(),
            config: SimulationConfig {
                duration,
                ..SimulationConfig::default()
            },
        }
    }

    #[test]
    fn snapshot_of_pair_and_directed_graph() {
        let costs = CostSpec::identity(3, None);
        let pair = simulator(
            DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]),
            costs.clone(),
            0.0,
        );
        let state = pair
            .initialize(vec![v(&[1., 2., 3.]), v(&[4., 5., 6.])], None)
            .unwrap();
        let snap = snapshot_neighbors(&state, &pair.topology, &costs).unwrap();
        assert_eq!(snap[0].neighbors[0].state, v(&[4., 5., 6.]));
        assert_eq!(snap[1].neighbors[0].state, v(&[1., 2., 3.]));

        let a = DMatrix::from_row_slice(
            5,
            5,
            &[
                0., 0., 1., 0., 0., 1., 0., 1., 0., 0., 0., 1., 0., 1., 0., 1., 0., 0., 0., 1., 1.,
                0., 0., 0., 0.,
            ],
        );
        let five = simulator(a, costs.clone(), 0.0);
        let states: Vec<_> = (0..5).map(|k| v(&[k as f64, 0., 0.])).collect();
        let mut state = five.initialize(states, None).unwrap();
        let snap = snapshot_neighbors(&state, &five.topology, &costs).unwrap();
        assert_eq!(snap[0].neighbors.len(), 1);
        assert_eq!(snap[0].neighbors[0].index, 2);
        assert_eq!(snap[0].neighbors[0].state, v(&[2., 0., 0.]));
        state.agent_states[2] = v(&[100., 0., 0.]);
        assert_eq!(snap[0].neighbors[0].state, v(&[2., 0., 0.]));
    }

    #[test]
    fn initialization_uses_terminal_gradient() {
        let costs = CostSpec::identity(3, None);
        let sim = simulator(
            DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]),
            costs.clone(),
            0.0,
        );
        let state = sim
            .initialize(vec![v(&[1., 1., 1.]), DVector::zeros(3)], None)
            .unwrap();
        assert_eq!(state.costates[0], v(&[2., 2., 2.]));
        assert_eq!(state.costates[1], v(&[-2., -2., -2.]));
        let off = simulator(
            DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]),
            costs.with_terminal_cost(false),
            0.0,
        );
        let state = off
            .initialize(vec![v(&[1., 1., 1.]), DVector::zeros(3)], None)
            .unwrap();
        assert!(state.costates.iter().all(|l| l == &DVector::zeros(3)));
        assert!(sim.initialize(vec![v(&[1., 1., 1.])], None).is_err());
        assert!(sim
            .initialize(vec![v(&[1., 1.]), v(&[1., 1.])], None)
            .is_err());
    }

    #[test]
    fn zero_duration_logs_initial_record() {
        let sim = simulator(
            DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]),
            CostSpec::identity(3, None),
            0.0,
        );
        let log = sim
            .run(vec![v(&[1., 2., 3.]), v(&[0., 0., 1.])], None)
            .unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].t, 0.0);
        assert_eq!(log.records[0].residual_norms, vec![0.0, 0.0]);
    }

    #[test]
    fn lone_agent_follows_uncontrolled_flow() {
        let sim = simulator(
            DMatrix::zeros(1, 1),
            CostSpec::identity(3, None).with_terminal_cost(false),
            0.5,
        );
        let x0 = v(&[1.0, 10.0, 2.0]);
        let log = sim.run(vec![x0.clone()], None).unwrap();
        let m = lorenz();
        let mut x = x0;
        for record in &log.records {
            assert_eq!(record.states[0], x);
            assert_eq!(record.controls[0], DVector::zeros(3));
            x = advance_plant(&m, &x, None, 0.01);
        }
        assert_eq!(log.records.len(), 51);
    }
}
