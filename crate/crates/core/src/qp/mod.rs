//! Dense-interface convex QP solver.
//!
//! Solves `min 1/2 z^T H z + f^T z` subject to `A_eq z = b_eq`,
//! `A_in z <= b_in` and `lb <= z <= ub` with an operator-splitting (ADMM)
//! iteration on a sparse quasi-definite KKT factorization, followed by an
//! active-set polishing step that recovers a high-accuracy KKT point.

mod admm;
mod ldl;
mod sparse;

pub use admm::QpSolver;
pub use ldl::{LdlError, SparseLdl};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem data: {0}")]
    InvalidData(String),
    #[error("KKT factorization failed: {0}")]
    Factorization(#[from] LdlError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let d = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, d),
            b_in: DVector::zeros(0),
            lb: DVector::from_element(d, f64::NEG_INFINITY),
            ub: DVector::from_element(d, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        let dim_err =
            |what: &str, got: String| Err(QpError::Dimension(format!("{what} is {got}, decision dimension {d}")));
        if self.h.shape() != (d, d) {
            return dim_err("H", format!("{:?}", self.h.shape()));
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return dim_err("A_eq/b_eq", format!("{:?}/{}", self.a_eq.shape(), self.b_eq.len()));
        }
        if self.a_in.ncols() != d || self.a_in.nrows() != self.b_in.len() {
            return dim_err("A_in/b_in", format!("{:?}/{}", self.a_in.shape(), self.b_in.len()));
        }
        if self.lb.len() != d || self.ub.len() != d {
            return dim_err("lb/ub", format!("{}/{}", self.lb.len(), self.ub.len()));
        }
        let finite = |m: &DMatrix<f64>| m.as_slice().iter().all(|v| v.is_finite());
        if !finite(&self.h) || !finite(&self.a_eq) || !finite(&self.a_in) {
            return Err(QpError::InvalidData("non-finite matrix entry".into()));
        }
        if !self.f.iter().chain(self.b_eq.iter()).all(|v| v.is_finite()) {
            return Err(QpError::InvalidData("non-finite vector entry".into()));
        }
        if self.b_in.iter().any(|v| v.is_nan()) {
            return Err(QpError::InvalidData("NaN in b_in".into()));
        }
        for i in 0..d {
            if self.lb[i].is_nan() || self.ub[i].is_nan() || self.lb[i] > self.ub[i] {
                return Err(QpError::InvalidData(format!(
                    "bounds of variable {i} are inconsistent: [{}, {}]",
                    self.lb[i], self.ub[i]
                )));
            }
        }
        Ok(())
    }

    /// `(H + H^T) / 2`.
    pub fn symmetric_h(&self) -> DMatrix<f64> {
        (&self.h + self.h.transpose()) * 0.5
    }

    /// `((H + H^T) / 2) z`, without forming the symmetrized matrix.
    pub fn hessian_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        (&self.h * z + self.h.tr_mul(z)) * 0.5
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&self.hessian_mul(z)) + self.f.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of `A_eq z = b_eq`.
    pub eq_duals: DVector<f64>,
    /// Multipliers of `A_in z <= b_in`, non-negative.
    pub ineq_duals: DVector<f64>,
    /// Bound multipliers: positive when the upper bound is active, negative
    /// for the lower bound.
    pub bound_duals: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub r_pri: f64,
    pub r_dual: f64,
    pub polished: bool,
}

/// Warm-start point; duals are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub duals: Option<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl From<&QpSolution> for WarmStart {
    fn from(s: &QpSolution) -> Self {
        Self {
            z: s.z.clone(),
            duals: Some((s.eq_duals.clone(), s.ineq_duals.clone(), s.bound_duals.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub max_iter: usize,
    /// Rescale `rho` when the normalized residual ratio leaves
    /// `[1/adaptive_rho_ratio, adaptive_rho_ratio]`.
    pub adaptive_rho_ratio: f64,
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    /// First iteration at which the infeasibility certificate is tested.
    pub infeasibility_after: usize,
    pub eps_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_pri: 1e-8,
            eps_dual: 1e-8,
            max_iter: 20_000,
            adaptive_rho_ratio: 10.0,
            check_interval: 5,
            scaling_iters: 10,
            polish: true,
            infeasibility_after: 1000,
            eps_infeasible: 1e-6,
        }
    }
}

/// Solve with a fresh solver instance.
pub fn solve(problem: &QpProblem, warm: Option<&WarmStart>, settings: &QpSettings) -> Result<QpSolution, QpError> {
    QpSolver::new(settings.clone()).solve(problem, warm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// Largest constraint violation.
    pub r_pri: f64,
    /// Stationarity residual, including any sign violation of `mu`.
    pub r_dual: f64,
    pub complementarity: f64,
}

/// KKT residuals of `(z, duals)` for `problem`.
pub fn kkt_residuals(problem: &QpProblem, s: &QpSolution) -> KktResiduals {
    let z = &s.z;
    let products = Products {
        hz: problem.hessian_mul(z),
        eq: &problem.a_eq * z,
        ineq: &problem.a_in * z,
        eq_t: problem.a_eq.tr_mul(&s.eq_duals),
        ineq_t: problem.a_in.tr_mul(&s.ineq_duals),
    };
    residuals_from(problem, s, products)
}

/// Matrix products entering the KKT residuals; the solver computes them from
/// its sparse copies, [`kkt_residuals`] from the dense problem.
pub(crate) struct Products {
    pub hz: DVector<f64>,
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub eq_t: DVector<f64>,
    pub ineq_t: DVector<f64>,
}

pub(crate) fn residuals_from(problem: &QpProblem, s: &QpSolution, p: Products) -> KktResiduals {
    let z = &s.z;
    let eq = p.eq - &problem.b_eq;
    let ineq = p.ineq - &problem.b_in;
    let mut r_pri = eq.amax();
    for v in ineq.iter() {
        r_pri = r_pri.max(*v);
    }
    for i in 0..z.len() {
        r_pri = r_pri.max(problem.lb[i] - z[i]).max(z[i] - problem.ub[i]);
    }

    let grad = p.hz + &problem.f + p.eq_t + p.ineq_t + &s.bound_duals;
    let mut r_dual = grad.amax();
    for mu in s.ineq_duals.iter() {
        r_dual = r_dual.max(-mu);
    }

    let mut complementarity: f64 = 0.0;
    for (mu, g) in s.ineq_duals.iter().zip(ineq.iter()) {
        complementarity = complementarity.max((mu * g).abs());
    }
    for i in 0..z.len() {
        let nu = s.bound_duals[i];
        let gap = if nu > 0.0 {
            problem.ub[i] - z[i]
        } else if nu < 0.0 {
            z[i] - problem.lb[i]
        } else {
            0.0
        };
        // An infinite gap with a nonzero multiplier is a dual defect.
        complementarity = complementarity.max(if gap.is_finite() {
            (nu * gap).abs()
        } else {
            f64::INFINITY
        });
    }
    KktResiduals {
        r_pri: r_pri.max(0.0),
        r_dual,
        complementarity,
    }
}

#[cfg(test)]
mod tests;
