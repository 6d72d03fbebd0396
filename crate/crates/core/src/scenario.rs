//! Scenario files and the built-in presets.
//!
//! A scenario is a JSON document describing the model, the communication
//! graph, initial conditions, weights and step sizes of one closed-loop run.
//! Validation reports every problem it finds rather than stopping at the
//! first one.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costs::{check_spd, CostSpec, HorizonSchedule};
use crate::dynamics::ModelKind;
use crate::simulator::{Aborted, SimulationConfig, Simulator, TrajectoryLog};
use crate::sweep::Stabilization;
use crate::topology::Topology;

pub const PRESETS: [&str; 4] = ["lorenz5", "lu4", "leader_lorenz", "leader_chen"];

/// A weight or gain matrix: a multiple of the identity, a diagonal, or a
/// full row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn identity() -> Self {
        MatrixSpec::Scalar(1.0)
    }

    /// Expands to an `n x n` matrix.
    pub fn to_matrix(&self, n: usize) -> Result<DMatrix<f64>, String> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::identity(n, n) * *v),
            MatrixSpec::Diagonal(d) => {
                if d.len() != n {
                    return Err(format!("diagonal has {} entries, expected {n}", d.len()));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
            }
            MatrixSpec::Full(rows) => rows_to_matrix(rows, Some(n)),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], square: Option<usize>) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(n) = square {
        if nrows != n || ncols != n {
            return Err(format!("matrix is {nrows}x{ncols}, expected {n}x{n}"));
        }
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(format!(
            "row {} has {} entries, expected {ncols}",
            i + 1,
            r.len()
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    /// Row-major adjacency; entry `(i, j)` is the weight agent `i` puts on `j`.
    pub adjacency: Vec<Vec<f64>>,
    /// Pinning weights `a_i0` towards the leader.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader: Option<Vec<f64>>,
    #[serde(default)]
    pub directed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditions {
    pub agents: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub stage: MatrixSpec,
    pub terminal: MatrixSpec,
    pub control: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader_terminal: Option<MatrixSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSpec {
    pub final_length: f64,
    pub growth_rate: f64,
}

fn default_stabilization() -> MatrixSpec {
    MatrixSpec::Scalar(-50.0)
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelKind,
    pub topology: TopologySpec,
    pub initial_conditions: InitialConditions,
    pub weights: Weights,
    pub horizon: HorizonSpec,
    #[serde(default = "default_stabilization")]
    pub stabilization: MatrixSpec,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default = "enabled")]
    pub terminal_cost: bool,
}

/// All validation failures of a scenario.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationErrors(pub Vec<String>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation error(s)", self.0.len())?;
        for e in &self.0 {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

impl ValidationErrors {
    pub fn contains(&self, needle: &str) -> bool {
        self.0.iter().any(|e| e.contains(needle))
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario")]
    Invalid(#[from] ValidationErrors),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid scenario")]
    Invalid(#[from] ValidationErrors),
    #[error("simulation failed")]
    Aborted(#[from] Box<Aborted>),
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub simulator: Simulator,
    pub agents: Vec<DVector<f64>>,
    pub leader: Option<DVector<f64>>,
}

fn finite_vector(
    what: &str,
    v: &[f64],
    n: usize,
    errors: &mut Vec<String>,
) -> Option<DVector<f64>> {
    if v.len() != n {
        errors.push(format!("{what} has {} components, expected {n}", v.len()));
        return None;
    }
    if v.iter().any(|x| !x.is_finite()) {
        errors.push(format!("{what} is not finite"));
        return None;
    }
    Some(DVector::from_column_slice(v))
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.topology.adjacency.len()
    }

    /// Checks every invariant and builds the simulator.
    pub fn validate(&self) -> Result<Setup, ValidationErrors> {
        let mut errors = Vec::new();
        let model = self.model.build();
        let n = model.state_dim();

        let topology = match rows_to_matrix(&self.topology.adjacency, None) {
            Err(e) => {
                errors.push(format!("topology.adjacency: {e}"));
                None
            }
            Ok(adjacency) => {
                let leader = self
                    .topology
                    .leader
                    .as_deref()
                    .map(DVector::from_column_slice);
                let found = Topology::check(&adjacency, leader.as_ref(), self.topology.directed);
                if found.is_empty() {
                    Topology::new(adjacency, leader, self.topology.directed).ok()
                } else {
                    errors.extend(found.into_iter().map(|e| format!("topology: {e}")));
                    None
                }
            }
        };

        let n_agents = self.n_agents();
        if self.initial_conditions.agents.len() != n_agents {
            errors.push(format!(
                "initial_conditions.agents has {} entries for {n_agents} agents",
                self.initial_conditions.agents.len()
            ));
        }
        let agents: Vec<_> = self
            .initial_conditions
            .agents
            .iter()
            .enumerate()
            .filter_map(|(i, x)| {
                finite_vector(
                    &format!("initial state of agent {}", i + 1),
                    x,
                    n,
                    &mut errors,
                )
            })
            .collect();
        let leader = self
            .initial_conditions
            .leader
            .as_ref()
            .and_then(|x| finite_vector("initial leader state", x, n, &mut errors));
        let pinned = self.topology.leader.is_some();
        if pinned && self.initial_conditions.leader.is_none() {
            errors.push("topology has a leader but initial_conditions.leader is missing".into());
        }
        if !pinned && self.initial_conditions.leader.is_some() {
            errors.push("initial_conditions.leader given but topology has no leader".into());
        }
        if pinned && self.weights.leader_terminal.is_none() {
            errors.push("topology has a leader but weights.leader_terminal is missing".into());
        }
        if !pinned && self.weights.leader_terminal.is_some() {
            errors.push("weights.leader_terminal given but topology has no leader".into());
        }

        let mut weight = |name: &'static str, spec: &MatrixSpec| match spec.to_matrix(n) {
            Err(e) => {
                errors.push(format!("weights.{name}: {e}"));
                None
            }
            Ok(m) => match check_spd(name, &m, n) {
                Err(e) => {
                    errors.push(e.to_string());
                    None
                }
                Ok(()) => Some(m),
            },
        };
        let q = weight("stage", &self.weights.stage);
        let qn = weight("terminal", &self.weights.terminal);
        let r = weight("control", &self.weights.control);
        let q0 = self
            .weights
            .leader_terminal
            .as_ref()
            .map(|s| weight("leader_terminal", s));

        let schedule = HorizonSchedule::new(self.horizon.final_length, self.horizon.growth_rate)
            .map_err(|e| errors.push(e.to_string()))
            .ok();
        let stabilization = match self.stabilization.to_matrix(n) {
            Err(e) => {
                errors.push(format!("stabilization: {e}"));
                None
            }
            Ok(m) => Stabilization::new(m, n)
                .map_err(|e| errors.push(e.to_string()))
                .ok(),
        };

        let sim = &self.simulation;
        for (name, v) in [("dt", sim.dt), ("dtau_target", sim.dtau_target)] {
            if !(v.is_finite() && v > 0.0) {
                errors.push(format!(
                    "simulation.{name} must be positive and finite, got {v}"
                ));
            }
        }
        if !(sim.duration.is_finite() && sim.duration >= 0.0) {
            errors.push(format!(
                "simulation.duration must be non-negative and finite, got {}",
                sim.duration
            ));
        }

        if !errors.is_empty() {
            return Err(ValidationErrors(errors));
        }
        let (Some(topology), Some(q), Some(qn), Some(r), Some(schedule), Some(stabilization)) =
            (topology, q, qn, r, schedule, stabilization)
        else {
            unreachable!("every missing piece records an error");
        };
        let costs = CostSpec::new(q, qn, r, q0.flatten(), self.terminal_cost)
            .map_err(|e| ValidationErrors(vec![e.to_string()]))?;
        Ok(Setup {
            simulator: Simulator {
                model,
                topology,
                costs,
                schedule,
                stabilization,
                config: *sim,
            },
            agents,
            leader,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text)?;
    scenario.validate()?;
    Ok(scenario)
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario(&fs::read_to_string(path)?)
}

/// Validates and runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<TrajectoryLog, RunError> {
    let setup = scenario.validate()?;
    setup
        .simulator
        .run(setup.agents, setup.leader)
        .map_err(|a| RunError::Aborted(Box::new(a)))
}

fn cols(columns: &[[f64; 3]]) -> Vec<Vec<f64>> {
    columns.iter().map(|c| c.to_vec()).collect()
}

fn rows<const N: usize>(m: [[f64; N]; N]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.to_vec()).collect()
}

const SHARED_STARTS: [[f64; 3]; 4] = [
    [1.0, 10.0, 2.0],
    [2.0, -1.0, 5.0],
    [-10.0, 20.0, 8.0],
    [9.0, -10.0, -2.0],
];

/// Fifth agent of the five-agent Lorenz network; only four starting points
/// are tabulated for it.
pub const LORENZ5_FIFTH_START: [f64; 3] = [5.0, 5.0, 5.0];

const FOLLOWER_STARTS: [[f64; 3]; 4] = [
    [-1.0, 10.0, 2.0],
    [2.0, -1.0, 5.0],
    [-10.0, 20.0, 8.0],
    [9.0, -10.0, -2.0],
];

const LEADER_START: [f64; 3] = [0.1, 0.2, 0.3];

fn base(
    name: &str,
    model: ModelKind,
    topology: TopologySpec,
    initial: InitialConditions,
    final_length: f64,
) -> Scenario {
    let leader = topology.leader.is_some();
    Scenario {
        name: name.to_string(),
        model,
        topology,
        initial_conditions: initial,
        weights: Weights {
            stage: MatrixSpec::identity(),
            terminal: MatrixSpec::identity(),
            control: MatrixSpec::identity(),
            leader_terminal: leader.then_some(MatrixSpec::Scalar(10.0)),
        },
        horizon: HorizonSpec {
            final_length,
            growth_rate: 0.01,
        },
        stabilization: default_stabilization(),
        simulation: SimulationConfig::default(),
        terminal_cost: true,
    }
}

/// Splits an augmented matrix into adjacency rows and the leader vector on
/// its diagonal.
fn split_augmented<const N: usize>(h: [[f64; N]; N]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let leader = (0..N).map(|i| h[i][i]).collect();
    let mut adjacency = rows(h);
    for (i, row) in adjacency.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    (adjacency, leader)
}

/// Built-in scenario by name.
pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    let scenario = match name {
        "lorenz5" => {
            let mut starts = SHARED_STARTS.to_vec();
            starts.push(LORENZ5_FIFTH_START);
            base(
                name,
                ModelKind::Lorenz,
                TopologySpec {
                    adjacency: rows([
                        [0.0, 0.0, 1.0, 0.0, 0.0],
                        [1.0, 0.0, 1.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0, 1.0, 0.0],
                        [1.0, 0.0, 0.0, 0.0, 1.0],
                        [1.0, 0.0, 0.0, 0.0, 0.0],
                    ]),
                    leader: None,
                    directed: true,
                },
                InitialConditions {
                    agents: cols(&starts),
                    leader: None,
                },
                1.0,
            )
        }
        "lu4" => base(
            name,
            ModelKind::Lu,
            TopologySpec {
                adjacency: rows([
                    [0.0, 1.0, 0.0, 1.0],
                    [1.0, 0.0, 1.0, 0.0],
                    [0.0, 1.0, 0.0, 1.0],
                    [1.0, 0.0, 1.0, 0.0],
                ]),
                leader: None,
                directed: false,
            },
            InitialConditions {
                agents: cols(&SHARED_STARTS),
                leader: None,
            },
            1.0,
        ),
        "leader_lorenz" => {
            let (adjacency, leader) = split_augmented([
                [1.0, 1.0, 0.0, 0.0],
                [1.0, 0.0, 1.0, 0.0],
                [0.0, 1.0, 1.0, 1.0],
                [0.0, 0.0, 1.0, 0.0],
            ]);
            base(
                name,
                ModelKind::Lorenz,
                TopologySpec {
                    adjacency,
                    leader: Some(leader),
                    directed: false,
                },
                InitialConditions {
                    agents: cols(&FOLLOWER_STARTS),
                    leader: Some(LEADER_START.to_vec()),
                },
                1.0,
            )
        }
        "leader_chen" => {
            let (adjacency, leader) = split_augmented([
                [1.0, 1.0, 1.0, 1.0],
                [1.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
                [1.0, 0.0, 0.0, 1.0],
            ]);
            base(
                name,
                ModelKind::Chen,
                TopologySpec {
                    adjacency,
                    leader: Some(leader),
                    directed: true,
                },
                InitialConditions {
                    agents: cols(&FOLLOWER_STARTS),
                    leader: Some(LEADER_START.to_vec()),
                },
                0.5,
            )
        }
        other => return Err(ScenarioError::UnknownPreset(other.to_string())),
    };
    Ok(scenario)
}
