//! Per-agent optimality system on the artificial horizon axis `τ ∈ [0, T]`.
//!
//! The horizon problem is integrated forward from the measured state and
//! the current costate guess; the mismatch of the terminal costate with the
//! terminal-cost gradient is the residual `P` that the continuation drives
//! to zero.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costs::{stage_cost_coupled, terminal_cost_coupled, CostSpec, Coupling};
use crate::dynamics::DynamicsModel;
use crate::ode::rk4_step;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("{phase} integration diverged at tau = {tau:.4}")]
    Divergence { phase: &'static str, tau: f64 },
    #[error("non-finite costate update at t = {t:.4}")]
    NonFiniteUpdate { t: f64 },
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

/// How coupled (neighbor or leader) states are predicted over the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Held at the value communicated at time `t`.
    Frozen,
    /// Propagated with the uncontrolled model `ẋ_j = F(x_j)`.
    #[default]
    OpenLoop,
}

/// Everything one agent needs to pose its horizon problem.
#[derive(Debug, Clone, Copy)]
pub struct AgentProblem<'a> {
    pub model: &'a dyn DynamicsModel,
    pub costs: &'a CostSpec,
    pub neighbor_prediction: Prediction,
    pub leader_prediction: Prediction,
}

impl<'a> AgentProblem<'a> {
    pub fn new(model: &'a dyn DynamicsModel, costs: &'a CostSpec) -> Self {
        Self {
            model,
            costs,
            neighbor_prediction: Prediction::Frozen,
            leader_prediction: Prediction::Frozen,
        }
    }

    pub fn with_prediction(mut self, neighbors: Prediction, leader: Prediction) -> Self {
        self.neighbor_prediction = neighbors;
        self.leader_prediction = leader;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn rate(&self, mode: Prediction, x: &DVector<f64>) -> DVector<f64> {
        match mode {
            Prediction::Frozen => DVector::zeros(x.len()),
            Prediction::OpenLoop => self.model.field(x),
        }
    }

    /// Predicted `dx_j/dτ` for every neighbor, then the leader (if any).
    pub fn coupling_rates(&self, coupling: &Coupling) -> Vec<DVector<f64>> {
        coupling
            .neighbors
            .iter()
            .map(|l| self.rate(self.neighbor_prediction, &l.state))
            .chain(
                coupling
                    .leader
                    .iter()
                    .map(|l| self.rate(self.leader_prediction, &l.state)),
            )
            .collect()
    }
}

/// Copy of `coupling` with every state moved by `h` times its rate.
pub fn advance_coupling(coupling: &Coupling, rates: &[DVector<f64>], h: f64) -> Coupling {
    let mut next = coupling.clone();
    let links = next.neighbors.iter_mut().chain(next.leader.iter_mut());
    for (link, rate) in links.zip(rates) {
        link.state += rate * h;
    }
    next
}

/// `H = L + λᵀ(F(x) + u)`.
pub fn hamiltonian(
    problem: &AgentProblem<'_>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    coupling: &Coupling,
) -> f64 {
    stage_cost_coupled(problem.costs, coupling, x, u) + lambda.dot(&(problem.model.field(x) + u))
}

/// Stationary point of `H` in `u`: `u = -R⁻¹λ`.
pub fn optimal_control(costs: &CostSpec, lambda: &DVector<f64>) -> DVector<f64> {
    -(costs.control_inverse() * lambda)
}

/// `H_xᵀ = Σ_j a_ij Q (x - x_j) + F_x(x)ᵀ λ`.
pub fn hamiltonian_gradient(
    problem: &AgentProblem<'_>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    coupling: &Coupling,
) -> DVector<f64> {
    problem.costs.stage() * coupling.weighted_disagreement(x)
        + problem.model.jacobian(x).tr_mul(lambda)
}

/// `dΛ/dτ = -H_xᵀ`.
pub fn costate_rhs(
    problem: &AgentProblem<'_>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    coupling: &Coupling,
) -> DVector<f64> {
    -hamiltonian_gradient(problem, x, lambda, coupling)
}

/// `Λ*(T) = φ_xᵀ(x*(T))`, zero when the terminal cost is disabled.
pub fn terminal_costate(costs: &CostSpec, x: &DVector<f64>, coupling: &Coupling) -> DVector<f64> {
    terminal_cost_coupled(costs, coupling, x).gradient
}

/// Forward solution of the horizon problem from `(x(t), Λ(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonGrid {
    pub horizon: f64,
    pub dtau: f64,
    pub states: Vec<DVector<f64>>,
    pub costates: Vec<DVector<f64>>,
    pub state_rates: Vec<DVector<f64>>,
    pub costate_rates: Vec<DVector<f64>>,
    /// Predicted neighbor and leader states at each node.
    pub couplings: Vec<Coupling>,
}

impl HorizonGrid {
    pub fn n_tau(&self) -> usize {
        self.states.len() - 1
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().expect("grid has at least one node")
    }

    pub fn terminal_costate(&self) -> &DVector<f64> {
        self.costates.last().expect("grid has at least one node")
    }

    pub fn terminal_coupling(&self) -> &Coupling {
        self.couplings.last().expect("grid has at least one node")
    }

    /// Cubic Hermite estimate of `(x, Λ)` halfway through interval `k`.
    pub fn midpoint(&self, k: usize) -> (DVector<f64>, DVector<f64>) {
        let h = self.dtau;
        let mid = |y: &[DVector<f64>], f: &[DVector<f64>]| {
            (&y[k] + &y[k + 1]) * 0.5 + (&f[k] - &f[k + 1]) * (h / 8.0)
        };
        (
            mid(&self.states, &self.state_rates),
            mid(&self.costates, &self.costate_rates),
        )
    }

    /// Predicted optimal cost `φ(x*(T)) + ∫ L dτ` (trapezoidal rule).
    pub fn cost_estimate(&self, problem: &AgentProblem<'_>) -> f64 {
        let running: Vec<f64> = (0..self.states.len())
            .map(|k| {
                let u = optimal_control(problem.costs, &self.costates[k]);
                stage_cost_coupled(problem.costs, &self.couplings[k], &self.states[k], &u)
            })
            .collect();
        let integral: f64 = running
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]) * self.dtau)
            .sum();
        terminal_cost_coupled(
            problem.costs,
            self.terminal_coupling(),
            self.terminal_state(),
        )
        .value
            + integral
    }
}

/// `n_tau = max(1, round(T / dtau_target))`, or zero steps for `T = 0`.
pub fn horizon_steps(horizon: f64, dtau_target: f64) -> usize {
    if horizon == 0.0 {
        0
    } else {
        ((horizon / dtau_target).round() as usize).max(1)
    }
}

/// Integrates `dx/dτ = F(x) - R⁻¹Λ` and `dΛ/dτ = -H_xᵀ` over `[0, T]` with RK4,
/// predicting coupled states alongside according to the problem's mode.
pub fn integrate_horizon_forward(
    problem: &AgentProblem<'_>,
    x0: &DVector<f64>,
    lambda0: &DVector<f64>,
    coupling0: &Coupling,
    horizon: f64,
    dtau_target: f64,
) -> Result<HorizonGrid, SolverError> {
    let n = problem.state_dim();
    if x0.len() != n || lambda0.len() != n {
        return Err(SolverError::InvalidInput(format!(
            "state/costate dimension {}/{} does not match model dimension {n}",
            x0.len(),
            lambda0.len()
        )));
    }
    if !horizon.is_finite() || horizon < 0.0 || dtau_target.is_nan() || dtau_target <= 0.0 {
        return Err(SolverError::InvalidInput(format!(
            "horizon {horizon} with step {dtau_target}"
        )));
    }
    let steps = horizon_steps(horizon, dtau_target);
    let dtau = if steps == 0 {
        0.0
    } else {
        horizon / steps as f64
    };
    let links = coupling0.neighbors.len() + usize::from(coupling0.leader.is_some());

    let pack = |x: &DVector<f64>, l: &DVector<f64>, c: &Coupling| {
        let mut y = DVector::zeros(n * (2 + links));
        y.rows_mut(0, n).copy_from(x);
        y.rows_mut(n, n).copy_from(l);
        let states = c.neighbors.iter().chain(c.leader.iter());
        for (k, link) in states.enumerate() {
            y.rows_mut(n * (2 + k), n).copy_from(&link.state);
        }
        y
    };
    let unpack = |y: &DVector<f64>| {
        let mut c = coupling0.clone();
        let states = c.neighbors.iter_mut().chain(c.leader.iter_mut());
        for (k, link) in states.enumerate() {
            link.state = y.rows(n * (2 + k), n).into_owned();
        }
        (y.rows(0, n).into_owned(), y.rows(n, n).into_owned(), c)
    };
    let rhs = |_: f64, y: &DVector<f64>| {
        let (x, l, c) = unpack(y);
        let mut dy = DVector::zeros(y.len());
        dy.rows_mut(0, n)
            .copy_from(&(problem.model.field(&x) + optimal_control(problem.costs, &l)));
        dy.rows_mut(n, n)
            .copy_from(&costate_rhs(problem, &x, &l, &c));
        for (k, rate) in problem.coupling_rates(&c).into_iter().enumerate() {
            dy.rows_mut(n * (2 + k), n).copy_from(&rate);
        }
        dy
    };

    let mut grid = HorizonGrid {
        horizon,
        dtau,
        states: Vec::with_capacity(steps + 1),
        costates: Vec::with_capacity(steps + 1),
        state_rates: Vec::with_capacity(steps + 1),
        costate_rates: Vec::with_capacity(steps + 1),
        couplings: Vec::with_capacity(steps + 1),
    };
    let mut y = pack(x0, lambda0, coupling0);
    for k in 0..=steps {
        let tau = k as f64 * dtau;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Divergence {
                phase: "forward",
                tau,
            });
        }
        let dy = rhs(tau, &y);
        let (x, l, c) = unpack(&y);
        grid.states.push(x);
        grid.costates.push(l);
        grid.state_rates.push(dy.rows(0, n).into_owned());
        grid.costate_rates.push(dy.rows(n, n).into_owned());
        grid.couplings.push(c);
        if k < steps {
            y = rk4_step(rhs, tau, &y, dtau);
        }
    }
    Ok(grid)
}

/// `P = Λ*(T) - φ_xᵀ(x*(T))`.
pub fn residual(costs: &CostSpec, grid: &HorizonGrid) -> DVector<f64> {
    grid.terminal_costate()
        - terminal_costate(costs, grid.terminal_state(), grid.terminal_coupling())
}
