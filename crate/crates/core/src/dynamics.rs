//! Discrete-time plant models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

/// A discrete-time plant `x+ = f(x, u)`, `y = C x`.
///
/// Implementations must be deterministic and provide exact Jacobians; the
/// SQP loop builds its local linear models from them.
pub trait PlantModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Indices of the planar position `(p_x, p_y)` inside the state vector.
    /// Safety barriers act on these components only.
    fn position_indices(&self) -> [usize; 2];

    fn step_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(df/dx, df/du)` evaluated at `(x, u)`.
    fn jacobians_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    fn output_matrix(&self) -> DMatrix<f64>;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.check_state(x)?;
        self.check_input(u)?;
        Ok(self.step_unchecked(x, u))
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        self.check_state(x)?;
        self.check_input(u)?;
        Ok(self.jacobians_unchecked(x, u))
    }

    fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.check_state(x)?;
        Ok(self.output_matrix() * x)
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<(), DynamicsError> {
        check_dim("state", x.len(), self.state_dim())
    }

    fn check_input(&self, u: &DVector<f64>) -> Result<(), DynamicsError> {
        check_dim("input", u.len(), self.input_dim())
    }
}

fn check_dim(what: &'static str, got: usize, expected: usize) -> Result<(), DynamicsError> {
    if got == expected {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch { what, got, expected })
    }
}

/// Forward-Euler unicycle with acceleration input.
///
/// State `[p_x, p_y, theta, v]`, input `[angular rate, acceleration]`,
/// output `[p_x, theta, v]`. The heading is not wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnicycleModel {
    pub dt: f64,
}

impl UnicycleModel {
    pub fn new(dt: f64) -> Self {
        Self { dt }
    }
}

impl PlantModel for UnicycleModel {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn position_indices(&self) -> [usize; 2] {
        [0, 1]
    }

    fn step_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (theta, v) = (x[2], x[3]);
        DVector::from_vec(vec![
            x[0] + v * theta.cos() * self.dt,
            x[1] + v * theta.sin() * self.dt,
            theta + u[0] * self.dt,
            v + u[1] * self.dt,
        ])
    }

    fn jacobians_unchecked(&self, x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (theta, v) = (x[2], x[3]);
        let dt = self.dt;
        let (s, c) = theta.sin_cos();
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, -v * s * dt, c * dt,
            0.0, 1.0,  v * c * dt, s * dt,
            0.0, 0.0,  1.0,        0.0,
            0.0, 0.0,  0.0,        1.0,
        ]);
        #[rustfmt::skip]
        let b = DMatrix::from_row_slice(4, 2, &[
            0.0, 0.0,
            0.0, 0.0,
            dt,  0.0,
            0.0, dt,
        ]);
        (a, b)
    }

    fn output_matrix(&self) -> DMatrix<f64> {
        #[rustfmt::skip]
        let c = DMatrix::from_row_slice(3, 4, &[
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]);
        c
    }
}

/// Central finite-difference Jacobians of `step`. Used as an oracle.
pub fn finite_difference_jacobians<M: PlantModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    eps: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.state_dim();
    let m = model.input_dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += eps;
        xm[j] -= eps;
        let col = (model.step_unchecked(&xp, u) - model.step_unchecked(&xm, u)) / (2.0 * eps);
        a.set_column(j, &col);
    }
    for j in 0..m {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += eps;
        um[j] -= eps;
        let col = (model.step_unchecked(x, &up) - model.step_unchecked(x, &um)) / (2.0 * eps);
        b.set_column(j, &col);
    }
    (a, b)
}
