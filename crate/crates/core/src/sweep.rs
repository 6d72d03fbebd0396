//! Backward-sweep realization of the stabilized continuation method.
//!
//! The linearized horizon problem is factored through
//! `Λ*_t - Λ*_τ = S(τ)(x*_t - x*_τ) + c(τ)`. `S` obeys a matrix Riccati
//! equation and `c` an affine one; both run backward from `τ = T`, where
//! the terminal conditions enforce `dP/dt = A_s P`. The costate at `τ = 0`
//! then advances in real time without any iteration.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::costs::{terminal_cost_coupled, Coupling, HorizonSchedule};
use crate::tpbvp::{
    advance_coupling, hamiltonian_gradient, integrate_horizon_forward, optimal_control, residual,
    AgentProblem, HorizonGrid, SolverError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilizationError {
    #[error("stabilization matrix must be square with dimension {expected}, got {rows}x{cols}")]
    Shape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("stabilization matrix is not Hurwitz (eigenvalue with real part {0})")]
    NotHurwitz(f64),
}

/// Continuation gain `A_s`; every eigenvalue has negative real part.
#[derive(Debug, Clone, PartialEq)]
pub struct Stabilization {
    gain: DMatrix<f64>,
}

impl Stabilization {
    pub fn new(gain: DMatrix<f64>, n: usize) -> Result<Self, StabilizationError> {
        if gain.nrows() != n || gain.ncols() != n {
            return Err(StabilizationError::Shape {
                expected: n,
                rows: gain.nrows(),
                cols: gain.ncols(),
            });
        }
        let worst = gain
            .complex_eigenvalues()
            .iter()
            .map(|e| e.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst.is_nan() || worst >= 0.0 {
            return Err(StabilizationError::NotHurwitz(worst));
        }
        Ok(Self { gain })
    }

    pub fn scalar(value: f64, n: usize) -> Result<Self, StabilizationError> {
        Self::new(DMatrix::identity(n, n) * value, n)
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

/// Coefficients of the linear variational system along the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Variational {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// `A = F_x`, `B = R⁻¹`, `C = H_xx = (Σ_j a_ij) Q + ∂²(λᵀF)/∂x²` for the
/// fully actuated plant (`f_u = I`, `H_ux = 0`).
pub fn variational_matrices(
    problem: &AgentProblem<'_>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    coupling: &Coupling,
) -> Variational {
    Variational {
        a: problem.model.jacobian(x),
        b: problem.costs.control_inverse().clone(),
        c: problem.costs.stage() * coupling.neighbor_weight()
            + problem.model.costate_hessian(lambda, x),
    }
}

/// `d/dτ φ_x` along the predicted trajectories at `τ = T`:
/// `Σ_j 2 a_ij Q_N (ẋ*(T) - ṗ_j(T))`, plus the same term for the leader.
/// With frozen coupling this is `φ_xx ẋ*(T)`.
fn terminal_gradient_rate(problem: &AgentProblem<'_>, grid: &HorizonGrid) -> DVector<f64> {
    let costs = problem.costs;
    let x_rate = grid.state_rates.last().expect("non-empty grid");
    let mut rate = DVector::zeros(x_rate.len());
    if !costs.use_terminal_cost() {
        return rate;
    }
    let coupling = grid.terminal_coupling();
    let rates = problem.coupling_rates(coupling);
    let weights = coupling
        .neighbors
        .iter()
        .map(|l| (l.weight, costs.terminal()))
        .chain(coupling.leader.iter().map(|l| {
            (
                l.weight,
                costs
                    .leader_terminal()
                    .expect("leader link implies leader weight"),
            )
        }));
    for ((a, q), p_rate) in weights.zip(&rates) {
        rate += q * (x_rate - p_rate) * (2.0 * a);
    }
    rate
}

/// `S(T) = φ_xx` and `c(T) = (H_xᵀ + dφ_x/dτ)|_T (1 + dT/dt) + A_s P`.
///
/// With frozen coupling `dφ_x/dτ = φ_xx f(x*(T), u*(T))`.
pub fn sweep_terminal_conditions(
    problem: &AgentProblem<'_>,
    grid: &HorizonGrid,
    horizon_rate: f64,
    residual: &DVector<f64>,
    stabilization: &Stabilization,
) -> (DMatrix<f64>, DVector<f64>) {
    let coupling = grid.terminal_coupling();
    let hessian = terminal_cost_coupled(problem.costs, coupling, grid.terminal_state()).hessian;
    let h_x = hamiltonian_gradient(
        problem,
        grid.terminal_state(),
        grid.terminal_costate(),
        coupling,
    );
    let drift = (h_x + terminal_gradient_rate(problem, grid)) * (1.0 + horizon_rate);
    (hessian, drift + stabilization.gain() * residual)
}

/// `S(τ)` and `c(τ)` on the nodes of the forward grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub s: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
}

fn riccati_rhs(v: &Variational, s: &DMatrix<f64>) -> DMatrix<f64> {
    let at_s = v.a.tr_mul(s);
    -&at_s - at_s.transpose() + s * &v.b * s - &v.c
}

fn affine_rhs(v: &Variational, s: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    -(v.a.tr_mul(c) - s * (&v.b * c))
}

/// Integrates `∂S/∂τ = -AᵀS - SA + SBS - C` and `∂c/∂τ = -(Aᵀ - SB) c` from
/// `τ = T` down to `τ = 0` with RK4 on the forward grid. Coefficients at
/// interval midpoints come from Hermite interpolation of the grid.
pub fn integrate_sweep_backward(
    problem: &AgentProblem<'_>,
    grid: &HorizonGrid,
    terminal_s: DMatrix<f64>,
    terminal_c: DVector<f64>,
) -> Result<SweepGrid, SolverError> {
    let steps = grid.n_tau();
    let at_node = |k: usize| {
        variational_matrices(
            problem,
            &grid.states[k],
            &grid.costates[k],
            &grid.couplings[k],
        )
    };
    let mut s = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut c = vec![DVector::zeros(0); steps + 1];
    s[steps] = terminal_s;
    c[steps] = terminal_c;
    let mut upper = at_node(steps);
    let h = -grid.dtau;
    for k in (0..steps).rev() {
        let (x_mid, l_mid) = grid.midpoint(k);
        let mid = variational_matrices(problem, &x_mid, &l_mid, &grid.couplings[k]);
        let lower = at_node(k);
        let (s1, c1) = (&s[k + 1], &c[k + 1]);

        let ks1 = riccati_rhs(&upper, s1);
        let kc1 = affine_rhs(&upper, s1, c1);
        let s2 = s1 + &ks1 * (0.5 * h);
        let c2 = c1 + &kc1 * (0.5 * h);
        let ks2 = riccati_rhs(&mid, &s2);
        let kc2 = affine_rhs(&mid, &s2, &c2);
        let s3 = s1 + &ks2 * (0.5 * h);
        let c3 = c1 + &kc2 * (0.5 * h);
        let ks3 = riccati_rhs(&mid, &s3);
        let kc3 = affine_rhs(&mid, &s3, &c3);
        let s4 = s1 + &ks3 * h;
        let c4 = c1 + &kc3 * h;
        let ks4 = riccati_rhs(&lower, &s4);
        let kc4 = affine_rhs(&lower, &s4, &c4);

        let next_s = s1 + (ks1 + ks2 * 2.0 + ks3 * 2.0 + ks4) * (h / 6.0);
        let next_c = c1 + (kc1 + kc2 * 2.0 + kc3 * 2.0 + kc4) * (h / 6.0);
        if next_s.iter().chain(next_c.iter()).any(|v| !v.is_finite()) {
            return Err(SolverError::Divergence {
                phase: "backward sweep",
                tau: k as f64 * grid.dtau,
            });
        }
        s[k] = (&next_s + next_s.transpose()) * 0.5;
        c[k] = next_c;
        upper = lower;
    }
    Ok(SweepGrid { s, c })
}

/// Inputs that stay fixed while one agent is solved at one instant.
#[derive(Debug, Clone)]
pub struct SolveSettings<'a> {
    pub schedule: HorizonSchedule,
    pub stabilization: &'a Stabilization,
    pub dtau_target: f64,
}

/// Forward pass, terminal conditions and backward sweep at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSolution {
    pub horizon: f64,
    pub horizon_rate: f64,
    pub grid: HorizonGrid,
    pub sweep: SweepGrid,
    pub residual: DVector<f64>,
    /// `dΛ/dt` from the sweep relation at `τ = 0`.
    pub costate_rate: DVector<f64>,
}

impl StageSolution {
    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }
}

/// Solves the horizon problem at time `t` and returns
/// `dΛ/dt = -H_xᵀ|_{τ=0} + S(0)(ẋ - x*_τ(0)) + c(0)`, where `ẋ` uses the
/// control actually applied. When the applied control equals `u*(0)` the
/// middle term vanishes.
pub fn solve_stage(
    problem: &AgentProblem<'_>,
    settings: &SolveSettings<'_>,
    t: f64,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    coupling: &Coupling,
    applied_control: &DVector<f64>,
) -> Result<StageSolution, SolverError> {
    let (horizon, horizon_rate) = settings
        .schedule
        .horizon(t)
        .map_err(|e| SolverError::InvalidInput(e.to_string()))?;
    let grid =
        integrate_horizon_forward(problem, x, lambda, coupling, horizon, settings.dtau_target)?;
    let p = residual(problem.costs, &grid);
    let (s_t, c_t) =
        sweep_terminal_conditions(problem, &grid, horizon_rate, &p, settings.stabilization);
    let sweep = integrate_sweep_backward(problem, &grid, s_t, c_t)?;
    let mismatch = applied_control - optimal_control(problem.costs, lambda);
    let costate_rate =
        -hamiltonian_gradient(problem, x, lambda, coupling) + &sweep.s[0] * mismatch + &sweep.c[0];
    Ok(StageSolution {
        horizon,
        horizon_rate,
        grid,
        sweep,
        residual: p,
        costate_rate,
    })
}

/// Result of advancing one agent's costate over `[t, t + dt]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateUpdate {
    pub costate: DVector<f64>,
    /// Solution at the start of the step (diagnostics refer to time `t`).
    pub initial: StageSolution,
}

/// One RK4 step of the real-time costate equation. The agent's own state
/// moves with the applied control held constant, coupled states move as
/// the prediction mode dictates, and every stage re-solves the horizon.
pub fn costate_time_update(
    problem: &AgentProblem<'_>,
    settings: &SolveSettings<'_>,
    t: f64,
    dt: f64,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    coupling: &Coupling,
) -> Result<CostateUpdate, SolverError> {
    let u = optimal_control(problem.costs, lambda);
    let initial = solve_stage(problem, settings, t, x, lambda, coupling, &u)?;
    let costate = advance_costate(problem, settings, t, dt, x, lambda, coupling, &u, &initial)?;
    Ok(CostateUpdate { costate, initial })
}

#[allow(clippy::too_many_arguments)]
fn advance_costate(
    problem: &AgentProblem<'_>,
    settings: &SolveSettings<'_>,
    t: f64,
    dt: f64,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    coupling: &Coupling,
    u: &DVector<f64>,
    initial: &StageSolution,
) -> Result<DVector<f64>, SolverError> {
    let state_rate = |x: &DVector<f64>| problem.model.field(x) + u;
    let half = 0.5 * dt;

    let kx1 = state_rate(x);
    let kp1 = problem.coupling_rates(coupling);
    let kl1 = initial.costate_rate.clone();

    let x2 = x + &kx1 * half;
    let p2 = advance_coupling(coupling, &kp1, half);
    let l2 = lambda + &kl1 * half;
    let kx2 = state_rate(&x2);
    let kp2 = problem.coupling_rates(&p2);
    let kl2 = solve_stage(problem, settings, t + half, &x2, &l2, &p2, u)?.costate_rate;

    let x3 = x + &kx2 * half;
    let p3 = advance_coupling(coupling, &kp2, half);
    let l3 = lambda + &kl2 * half;
    let kx3 = state_rate(&x3);
    let kp3 = problem.coupling_rates(&p3);
    let kl3 = solve_stage(problem, settings, t + half, &x3, &l3, &p3, u)?.costate_rate;

    let x4 = x + &kx3 * dt;
    let p4 = advance_coupling(coupling, &kp3, dt);
    let l4 = lambda + &kl3 * dt;
    let kl4 = solve_stage(problem, settings, t + dt, &x4, &l4, &p4, u)?.costate_rate;

    let next = lambda + (kl1 + kl2 * 2.0 + kl3 * 2.0 + kl4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteUpdate { t });
    }
    Ok(next)
}
