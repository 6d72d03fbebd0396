//! Performance index terms and the growing horizon schedule.
//!
//! Weighted norms are quadratic forms, `‖v‖²_P = vᵀ P v`. The running cost
//! carries a ½ prefactor, the terminal cost does not.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::topology::Topology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("weight {name} must be square with dimension {expected}, got {rows}x{cols}")]
    Shape {
        name: &'static str,
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("weight {0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("weight {0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("missing state for neighbor {}", .0 + 1)]
    MissingNeighbor(usize),
    #[error("agent {} is pinned to the leader but no leader state was supplied", .0 + 1)]
    MissingLeaderState(usize),
    #[error("horizon parameters must be positive (final length {final_length}, growth rate {growth_rate})")]
    InvalidHorizon { final_length: f64, growth_rate: f64 },
    #[error("horizon queried at negative time {0}")]
    NegativeTime(f64),
}

/// Quadratic weights of one agent's performance index.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    stage: DMatrix<f64>,
    terminal: DMatrix<f64>,
    control: DMatrix<f64>,
    control_inverse: DMatrix<f64>,
    leader_terminal: Option<DMatrix<f64>>,
    use_terminal_cost: bool,
}

impl CostSpec {
    pub fn new(
        stage: DMatrix<f64>,
        terminal: DMatrix<f64>,
        control: DMatrix<f64>,
        leader_terminal: Option<DMatrix<f64>>,
        use_terminal_cost: bool,
    ) -> Result<Self, CostError> {
        let n = stage.nrows();
        let mut checks = vec![
            ("stage", &stage),
            ("terminal", &terminal),
            ("control", &control),
        ];
        if let Some(q0) = &leader_terminal {
            checks.push(("leader_terminal", q0));
        }
        if let Some(e) = checks
            .into_iter()
            .find_map(|(name, m)| check_spd(name, m, n).err())
        {
            return Err(e);
        }
        let control_inverse = Cholesky::new(control.clone())
            .ok_or(CostError::NotPositiveDefinite("control"))?
            .inverse();
        Ok(Self {
            stage,
            terminal,
            control,
            control_inverse,
            leader_terminal,
            use_terminal_cost,
        })
    }

    /// Identity weights of dimension `n`, with an optional scaled identity
    /// on the leader term.
    pub fn identity(n: usize, leader_scale: Option<f64>) -> Self {
        let eye = DMatrix::identity(n, n);
        Self::new(
            eye.clone(),
            eye.clone(),
            eye.clone(),
            leader_scale.map(|s| &eye * s),
            true,
        )
        .expect("identity weights are SPD")
    }

    pub fn with_terminal_cost(mut self, enabled: bool) -> Self {
        self.use_terminal_cost = enabled;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.stage.nrows()
    }

    pub fn stage(&self) -> &DMatrix<f64> {
        &self.stage
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        &self.terminal
    }

    pub fn control(&self) -> &DMatrix<f64> {
        &self.control
    }

    pub fn control_inverse(&self) -> &DMatrix<f64> {
        &self.control_inverse
    }

    pub fn leader_terminal(&self) -> Option<&DMatrix<f64>> {
        self.leader_terminal.as_ref()
    }

    pub fn use_terminal_cost(&self) -> bool {
        self.use_terminal_cost
    }
}

/// Symmetric to a relative tolerance of 1e-12 and Cholesky-factorizable.
pub fn check_spd(name: &'static str, m: &DMatrix<f64>, n: usize) -> Result<(), CostError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(CostError::Shape {
            name,
            expected: n,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale || m.iter().any(|v| !v.is_finite()) {
        return Err(CostError::NotSymmetric(name));
    }
    Cholesky::new(m.clone())
        .map(|_| ())
        .ok_or(CostError::NotPositiveDefinite(name))
}

/// `T(t) = T_f (1 - e^{-αt})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonSchedule {
    final_length: f64,
    growth_rate: f64,
}

impl HorizonSchedule {
    pub fn new(final_length: f64, growth_rate: f64) -> Result<Self, CostError> {
        let valid = |v: f64| v.is_finite() && v > 0.0;
        if !valid(final_length) || !valid(growth_rate) {
            return Err(CostError::InvalidHorizon {
                final_length,
                growth_rate,
            });
        }
        Ok(Self {
            final_length,
            growth_rate,
        })
    }

    pub fn final_length(&self) -> f64 {
        self.final_length
    }

    pub fn growth_rate(&self) -> f64 {
        self.growth_rate
    }

    /// Horizon length and its exact time derivative.
    pub fn horizon(&self, t: f64) -> Result<(f64, f64), CostError> {
        if t < 0.0 || t.is_nan() {
            return Err(CostError::NegativeTime(t));
        }
        let decay = (-self.growth_rate * t).exp();
        Ok((
            -self.final_length * (-self.growth_rate * t).exp_m1(),
            self.final_length * self.growth_rate * decay,
        ))
    }
}

/// States of an agent's neighbors, keyed by agent index.
pub type NeighborStates = BTreeMap<usize, DVector<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub index: usize,
    pub weight: f64,
    pub state: DVector<f64>,
}

/// The neighbor and leader states one agent's cost depends on, with their
/// edge weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Coupling {
    pub neighbors: Vec<Link>,
    pub leader: Option<Link>,
}

impl Coupling {
    /// Collects `x_j` for every `j ∈ N_i`, plus the leader when agent `i` is
    /// pinned and the cost carries a leader weight.
    pub fn gather(
        spec: &CostSpec,
        topology: &Topology,
        i: usize,
        states: &NeighborStates,
        leader: Option<&DVector<f64>>,
    ) -> Result<Self, CostError> {
        let neighbors = topology
            .neighbors(i)
            .map_err(|_| CostError::MissingNeighbor(i))?
            .into_iter()
            .map(|j| {
                states
                    .get(&j)
                    .map(|x| Link {
                        index: j,
                        weight: topology.weight(i, j),
                        state: x.clone(),
                    })
                    .ok_or(CostError::MissingNeighbor(j))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let a0 = topology.leader_weight(i);
        let leader = if a0 > 0.0 && spec.leader_terminal().is_some() {
            let x0 = leader.ok_or(CostError::MissingLeaderState(i))?;
            Some(Link {
                index: usize::MAX,
                weight: a0,
                state: x0.clone(),
            })
        } else {
            None
        };
        Ok(Self { neighbors, leader })
    }

    /// `Σ_j a_ij`.
    pub fn neighbor_weight(&self) -> f64 {
        self.neighbors.iter().map(|l| l.weight).sum()
    }

    /// `Σ_j a_ij (x - x_j)`.
    pub fn weighted_disagreement(&self, x: &DVector<f64>) -> DVector<f64> {
        self.neighbors
            .iter()
            .fold(DVector::zeros(x.len()), |acc, l| {
                acc + (x - &l.state) * l.weight
            })
    }
}

/// `L_i = ½ [Σ_j a_ij ‖x_i - x_j‖²_Q + ‖u‖²_R]`.
pub fn stage_cost_coupled(
    spec: &CostSpec,
    coupling: &Coupling,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let disagreement: f64 = coupling
        .neighbors
        .iter()
        .map(|l| {
            let d = x - &l.state;
            l.weight * d.dot(&(spec.stage() * &d))
        })
        .sum();
    0.5 * (disagreement + u.dot(&(spec.control() * u)))
}

pub fn stage_cost(
    spec: &CostSpec,
    topology: &Topology,
    i: usize,
    x: &DVector<f64>,
    neighbors: &NeighborStates,
    u: &DVector<f64>,
) -> Result<f64, CostError> {
    let coupling = Coupling::gather(spec, topology, i, neighbors, None)?;
    Ok(stage_cost_coupled(spec, &coupling, x, u))
}

/// Terminal cost value with its gradient and (constant) Hessian in `x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `φ_i = Σ_j a_ij ‖x_i - x_j‖²_{Q_N} + a_i0 ‖x_i - x_0‖²_{Q_0}`; all zero when
/// the terminal cost is disabled.
pub fn terminal_cost_coupled(
    spec: &CostSpec,
    coupling: &Coupling,
    x: &DVector<f64>,
) -> TerminalCost {
    let n = x.len();
    let mut out = TerminalCost {
        value: 0.0,
        gradient: DVector::zeros(n),
        hessian: DMatrix::zeros(n, n),
    };
    if !spec.use_terminal_cost() {
        return out;
    }
    let terms = coupling
        .neighbors
        .iter()
        .map(|l| (l, spec.terminal()))
        .chain(coupling.leader.iter().zip(spec.leader_terminal()));
    for (link, weight) in terms {
        let d = x - &link.state;
        let wd = weight * &d;
        out.value += link.weight * d.dot(&wd);
        out.gradient += wd * (2.0 * link.weight);
        out.hessian += weight * (2.0 * link.weight);
    }
    out
}

pub fn terminal_cost(
    spec: &CostSpec,
    topology: &Topology,
    i: usize,
    x: &DVector<f64>,
    neighbors: &NeighborStates,
    leader: Option<&DVector<f64>>,
) -> Result<TerminalCost, CostError> {
    let coupling = Coupling::gather(spec, topology, i, neighbors, leader)?;
    Ok(terminal_cost_coupled(spec, &coupling, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn pair() -> Topology {
        Topology::new(
            DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]),
            None,
            false,
        )
        .unwrap()
    }

    fn states(j: usize, x: DVector<f64>) -> NeighborStates {
        NeighborStates::from([(j, x)])
    }

    #[test]
    fn horizon_schedule() {
        let h = HorizonSchedule::new(1.0, 0.01).unwrap();
        assert_eq!(h.horizon(0.0).unwrap(), (0.0, 0.01));
        let (t, _) = h.horizon(100.0).unwrap();
        assert_relative_eq!(t, 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(t, 0.63212, epsilon = 1e-5);
        let (t, dt) = h.horizon(1e4).unwrap();
        assert_relative_eq!(t, 1.0, epsilon = 1e-12);
        assert!(dt < 1e-40);
        assert_eq!(h.horizon(-1.0), Err(CostError::NegativeTime(-1.0)));
        assert!(HorizonSchedule::new(0.0, 1.0).is_err());
        assert!(HorizonSchedule::new(1.0, -1.0).is_err());
    }

    #[test]
    fn stage_cost_values() {
        let spec = CostSpec::identity(3, None);
        let t = pair();
        let x = v(&[1.0, 2.0, 3.0]);
        assert_eq!(
            stage_cost(&spec, &t, 0, &x, &states(1, x.clone()), &DVector::zeros(3)).unwrap(),
            0.0
        );
        let c = stage_cost(
            &spec,
            &t,
            0,
            &v(&[1., 0., 0.]),
            &states(1, DVector::zeros(3)),
            &DVector::zeros(3),
        );
        assert_eq!(c.unwrap(), 0.5);
        let lonely = Topology::new(DMatrix::zeros(1, 1), None, false).unwrap();
        let c = stage_cost(
            &spec,
            &lonely,
            0,
            &x,
            &NeighborStates::new(),
            &v(&[1., 2., 3.]),
        );
        assert_eq!(c.unwrap(), 7.0);
    }

    #[test]
    fn stage_cost_requires_neighbors() {
        let spec = CostSpec::identity(3, None);
        let x = DVector::zeros(3);
        assert_eq!(
            stage_cost(&spec, &pair(), 0, &x, &NeighborStates::new(), &x),
            Err(CostError::MissingNeighbor(1))
        );
    }

    #[test]
    fn terminal_cost_values() {
        let spec = CostSpec::identity(3, None);
        let x = v(&[1.0, 1.0, 1.0]);
        let at_consensus =
            terminal_cost(&spec, &pair(), 0, &x, &states(1, x.clone()), None).unwrap();
        assert_eq!(at_consensus.value, 0.0);
        assert_eq!(at_consensus.gradient, DVector::zeros(3));
        let tc = terminal_cost(&spec, &pair(), 0, &x, &states(1, DVector::zeros(3)), None).unwrap();
        assert_eq!(tc.value, 3.0);
        assert_eq!(tc.gradient, v(&[2.0, 2.0, 2.0]));
        assert_eq!(tc.hessian, DMatrix::identity(3, 3) * 2.0);
    }

    #[test]
    fn leader_terminal_cost() {
        let spec = CostSpec::identity(3, Some(10.0));
        let t = Topology::new(DMatrix::zeros(1, 1), Some(v(&[1.0])), true).unwrap();
        let x0 = v(&[0.1, 0.2, 0.3]);
        let x = &x0 + v(&[1.0, 0.0, 0.0]);
        let tc = terminal_cost(&spec, &t, 0, &x, &NeighborStates::new(), Some(&x0)).unwrap();
        assert_relative_eq!(tc.value, 10.0, epsilon = 1e-12);
        assert_eq!(tc.hessian, DMatrix::identity(3, 3) * 20.0);
        assert_eq!(
            terminal_cost(&spec, &t, 0, &x, &NeighborStates::new(), None),
            Err(CostError::MissingLeaderState(0))
        );
    }

    #[test]
    fn disabled_terminal_cost_is_zero() {
        let spec = CostSpec::identity(3, None).with_terminal_cost(false);
        let tc = terminal_cost(
            &spec,
            &pair(),
            0,
            &v(&[5., 1., 2.]),
            &states(1, DVector::zeros(3)),
            None,
        )
        .unwrap();
        assert_eq!(tc.value, 0.0);
        assert_eq!(tc.gradient, DVector::zeros(3));
        assert_eq!(tc.hessian, DMatrix::zeros(3, 3));
    }

    #[test]
    fn rejects_indefinite_weights() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let bad = DMatrix::from_diagonal(&v(&[1.0, -1.0, 1.0]));
        assert_eq!(
            CostSpec::new(bad, eye.clone(), eye.clone(), None, true),
            Err(CostError::NotPositiveDefinite("stage"))
        );
        let mut asym = eye.clone();
        asym[(0, 1)] = 0.5;
        assert_eq!(
            CostSpec::new(eye.clone(), asym, eye.clone(), None, true),
            Err(CostError::NotSymmetric("terminal"))
        );
        assert!(matches!(
            CostSpec::new(
                eye.clone(),
                eye.clone(),
                DMatrix::identity(2, 2),
                None,
                true
            ),
            Err(CostError::Shape {
                name: "control",
                ..
            })
        ));
    }

    fn spd3() -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-1.0f64..1.0, 9).prop_map(|e| {
            let m = DMatrix::from_vec(3, 3, e);
            &m * m.transpose() + DMatrix::identity(3, 3) * 0.5
        })
    }

    proptest! {
        #[test]
        fn stage_cost_is_nonnegative(
            q in spd3(),
            r in spd3(),
            x in prop::array::uniform3(-5.0f64..5.0),
            y in prop::array::uniform3(-5.0f64..5.0),
            u in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let spec = CostSpec::new(q.clone(), q, r, None, true).unwrap();
            let c = stage_cost(&spec, &pair(), 0, &v(&x), &states(1, v(&y)), &v(&u)).unwrap();
            prop_assert!(c >= 0.0);
        }

        #[test]
        fn terminal_gradient_matches_finite_differences(
            qn in spd3(),
            q0 in spd3(),
            x in prop::array::uniform3(-5.0f64..5.0),
            y in prop::array::uniform3(-5.0f64..5.0),
            z in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let spec = CostSpec::new(DMatrix::identity(3, 3), qn, DMatrix::identity(3, 3), Some(q0), true).unwrap();
            let t = Topology::new(DMatrix::from_row_slice(2, 2, &[0., 0.7, 1.3, 0.]), Some(v(&[2.0, 0.0])), true).unwrap();
            let (x, ns, leader) = (v(&x), states(1, v(&y)), v(&z));
            let tc = terminal_cost(&spec, &t, 0, &x, &ns, Some(&leader)).unwrap();
            let mut fd = DVector::zeros(3);
            for k in 0..3 {
                let h = 1e-5 * (1.0 + x[k].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fp = terminal_cost(&spec, &t, 0, &xp, &ns, Some(&leader)).unwrap().value;
                let fm = terminal_cost(&spec, &t, 0, &xm, &ns, Some(&leader)).unwrap().value;
                fd[k] = (fp - fm) / (2.0 * h);
            }
            prop_assert!((fd - &tc.gradient).norm() <= 1e-6 * (1.0 + tc.gradient.norm()));
        }

        #[test]
        fn horizon_is_increasing(t1 in 0.0f64..500.0, dt in 1e-3f64..50.0) {
            let h = HorizonSchedule::new(1.0, 0.01).unwrap();
            let (a, _) = h.horizon(t1).unwrap();
            let (b, _) = h.horizon(t1 + dt).unwrap();
            prop_assert!(b > a);
            prop_assert!(b < 1.0);
        }
    }
}
