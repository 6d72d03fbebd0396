//! Agent vector fields with the derivative information used by the solver.
//!
//! Every model is fully actuated: the closed-loop plant is `ẋ = F(x) + u`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{what} has dimension {got}, model expects {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{0} contains a non-finite entry")]
    NonFinite(&'static str),
    #[error("unknown model {0:?} (expected lorenz, lu or chen)")]
    UnknownModel(String),
}

/// Vector field `F`, its Jacobian `F_x` and the costate-contracted Hessian
/// `∂²(λᵀF)/∂x²` of a single agent.
pub trait DynamicsModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;

    fn field(&self, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Symmetric matrix `∂²(λᵀF)/∂x²`, linear in `λ`.
    fn costate_hessian(&self, lambda: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;

    /// Optional Lipschitz bound of the Jacobian; informational only.
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }
}

/// Three-dimensional quadratic oscillator covering the Lorenz, Lü and Chen
/// families:
///
/// ```text
/// ẋ₁ = a (x₂ - x₁)
/// ẋ₂ = c x₁ + d x₂ - x₁ x₃
/// ẋ₃ = x₁ x₂ - b x₃
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticOscillator {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl QuadraticOscillator {
    pub fn field3(&self, x: [f64; 3]) -> [f64; 3] {
        let [x1, x2, x3] = x;
        [
            self.a * (x2 - x1),
            self.c * x1 + self.d * x2 - x1 * x3,
            x1 * x2 - self.b * x3,
        ]
    }
}

pub fn lorenz() -> QuadraticOscillator {
    QuadraticOscillator {
        a: 10.0,
        b: 8.0 / 3.0,
        c: 28.0,
        d: -1.0,
    }
}

pub fn lu_system() -> QuadraticOscillator {
    QuadraticOscillator {
        a: 36.0,
        b: 3.0,
        c: 0.0,
        d: 13.0,
    }
}

pub fn chen() -> QuadraticOscillator {
    QuadraticOscillator {
        a: 35.0,
        b: 3.0,
        c: -7.0,
        d: 28.0,
    }
}

impl DynamicsModel for QuadraticOscillator {
    fn state_dim(&self) -> usize {
        3
    }

    fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        let f = self.field3([x[0], x[1], x[2]]);
        DVector::from_column_slice(&f)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (x1, x2, x3) = (x[0], x[1], x[2]);
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -self.a,
                self.a,
                0.0, //
                self.c - x3,
                self.d,
                -x1, //
                x2,
                x1,
                -self.b,
            ],
        )
    }

    fn costate_hessian(&self, lambda: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        // Only the bilinear terms -x₁x₃ (row 2) and x₁x₂ (row 3) contribute.
        let (l2, l3) = (lambda[1], lambda[2]);
        DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0, l3, -l2, //
                l3, 0.0, 0.0, //
                -l2, 0.0, 0.0,
            ],
        )
    }
}

/// Linear field `F(x) = A x`, used for LQR cross-checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>) -> Self {
        assert!(a.is_square(), "linear model needs a square matrix");
        Self { a }
    }

    pub fn scalar(a: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, a))
    }
}

impl DynamicsModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn costate_hessian(&self, _lambda: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.a.nrows(), self.a.nrows())
    }
}

/// Model names accepted in scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lorenz,
    Lu,
    Chen,
}

impl ModelKind {
    pub fn build(self) -> Arc<dyn DynamicsModel> {
        Arc::new(self.oscillator())
    }

    pub fn oscillator(self) -> QuadraticOscillator {
        match self {
            ModelKind::Lorenz => lorenz(),
            ModelKind::Lu => lu_system(),
            ModelKind::Chen => chen(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lorenz => "lorenz",
            ModelKind::Lu => "lu",
            ModelKind::Chen => "chen",
        }
    }
}

impl FromStr for ModelKind {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lorenz" => Ok(ModelKind::Lorenz),
            "lu" => Ok(ModelKind::Lu),
            "chen" => Ok(ModelKind::Chen),
            other => Err(DynamicsError::UnknownModel(other.to_string())),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn check_vector(
    model: &dyn DynamicsModel,
    what: &'static str,
    v: &DVector<f64>,
) -> Result<(), DynamicsError> {
    if v.len() != model.state_dim() {
        return Err(DynamicsError::DimensionMismatch {
            what,
            got: v.len(),
            expected: model.state_dim(),
        });
    }
    if v.iter().any(|e| !e.is_finite()) {
        return Err(DynamicsError::NonFinite(what));
    }
    Ok(())
}

pub fn eval_field(
    model: &dyn DynamicsModel,
    x: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    check_vector(model, "state", x)?;
    Ok(model.field(x))
}

pub fn eval_jacobian(
    model: &dyn DynamicsModel,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>, DynamicsError> {
    check_vector(model, "state", x)?;
    Ok(model.jacobian(x))
}

pub fn eval_costate_hessian(
    model: &dyn DynamicsModel,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>, DynamicsError> {
    check_vector(model, "state", x)?;
    check_vector(model, "costate", lambda)?;
    Ok(model.costate_hessian(lambda, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn models() -> [QuadraticOscillator; 3] {
        [lorenz(), lu_system(), chen()]
    }

    #[test]
    fn fields_vanish_at_origin() {
        for m in models() {
            assert_eq!(m.field(&DVector::zeros(3)), DVector::zeros(3));
        }
    }

    #[test]
    fn lorenz_values() {
        let m = lorenz();
        let f = m.field(&v(&[1.0, 1.0, 1.0]));
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert_relative_eq!(f[2], -5.0 / 3.0, epsilon = 1e-15);
        assert_eq!(
            m.jacobian(&DVector::zeros(3)),
            DMatrix::from_row_slice(3, 3, &[-10., 10., 0., 28., -1., 0., 0., 0., -8. / 3.])
        );
        let f = eval_field(&m, &v(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(f[0], 10.0);
        assert_eq!(f[1], 23.0);
        assert_relative_eq!(f[2], 2.0 - 8.0, epsilon = 1e-14);
    }

    #[test]
    fn lu_values() {
        let m = lu_system();
        assert_eq!(m.field(&v(&[1.0, 1.0, 1.0])), v(&[0.0, 12.0, -2.0]));
        let h = m.costate_hessian(&v(&[0.0, 1.0, 0.0]), &v(&[4.0, -2.0, 7.0]));
        let mut expected = DMatrix::zeros(3, 3);
        expected[(0, 2)] = -1.0;
        expected[(2, 0)] = -1.0;
        assert_eq!(h, expected);
    }

    #[test]
    fn chen_values() {
        let m = chen();
        assert_eq!(m.field(&v(&[1.0, 0.0, 0.0])), v(&[-35.0, -7.0, 0.0]));
        assert_eq!(
            m.jacobian(&DVector::zeros(3)),
            DMatrix::from_row_slice(3, 3, &[-35., 35., 0., -7., 28., 0., 0., 0., -3.])
        );
        // λ = (1,1,1): λ₂ enters through -x₁x₃, λ₃ through x₁x₂.
        let h = eval_costate_hessian(&m, &DVector::zeros(3), &v(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(
            h,
            DMatrix::from_row_slice(3, 3, &[0., 1., -1., 1., 0., 0., -1., 0., 0.])
        );
    }

    #[test]
    fn zero_costate_gives_zero_hessian() {
        for m in models() {
            assert_eq!(
                m.costate_hessian(&DVector::zeros(3), &v(&[1.0, -3.0, 2.0])),
                DMatrix::zeros(3, 3)
            );
        }
    }

    #[test]
    fn evaluation_rejects_bad_input() {
        let m = lorenz();
        assert!(matches!(
            eval_field(&m, &v(&[1.0, 2.0])),
            Err(DynamicsError::DimensionMismatch { got: 2, .. })
        ));
        assert_eq!(
            eval_jacobian(&m, &v(&[1.0, f64::NAN, 0.0])),
            Err(DynamicsError::NonFinite("state"))
        );
        assert_eq!(
            eval_costate_hessian(&m, &DVector::zeros(3), &v(&[f64::INFINITY, 0.0, 0.0])),
            Err(DynamicsError::NonFinite("costate"))
        );
    }

    #[test]
    fn model_names() {
        for kind in [ModelKind::Lorenz, ModelKind::Lu, ModelKind::Chen] {
            assert_eq!(kind.as_str().parse::<ModelKind>().unwrap(), kind);
        }
        assert!("rossler".parse::<ModelKind>().is_err());
    }

    fn central_jacobian(m: &dyn DynamicsModel, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-5 * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            j.set_column(k, &((m.field(&xp) - m.field(&xm)) / (2.0 * h)));
        }
        j
    }

    fn central_hessian(m: &dyn DynamicsModel, l: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            let step = 1e-5 * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += step;
            xm[k] -= step;
            let g = m.jacobian(&xp).transpose() * l - m.jacobian(&xm).transpose() * l;
            h.set_column(k, &(g / (2.0 * step)));
        }
        h
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / (1.0 + b.norm())
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(
            which in 0usize..3,
            x in prop::array::uniform3(-30.0f64..30.0),
        ) {
            let m = models()[which];
            let x = v(&x);
            prop_assert!(rel_err(&central_jacobian(&m, &x), &m.jacobian(&x)) < 1e-6);
        }

        #[test]
        fn costate_hessian_matches_finite_differences_and_is_symmetric(
            which in 0usize..3,
            x in prop::array::uniform3(-30.0f64..30.0),
            l in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let m = models()[which];
            let (x, l) = (v(&x), v(&l));
            let h = m.costate_hessian(&l, &x);
            prop_assert_eq!(&h, &h.transpose());
            prop_assert!(rel_err(&central_hessian(&m, &l, &x), &h) < 1e-5);
        }

        #[test]
        fn costate_hessian_is_linear_in_costate(
            which in 0usize..3,
            l1 in prop::array::uniform3(-10i32..10),
            l2 in prop::array::uniform3(-10i32..10),
            a in -4i32..4,
            b in -4i32..4,
        ) {
            // Integer-valued inputs keep the identity exact in floating point.
            let m = models()[which];
            let x = v(&[0.3, -1.2, 2.5]);
            let l1 = v(&l1.map(f64::from));
            let l2 = v(&l2.map(f64::from));
            let (a, b) = (f64::from(a), f64::from(b));
            let lhs = m.costate_hessian(&(&l1 * a + &l2 * b), &x);
            let rhs = m.costate_hessian(&l1, &x) * a + m.costate_hessian(&l2, &x) * b;
            prop_assert_eq!(lhs, rhs);
        }
    }
}
