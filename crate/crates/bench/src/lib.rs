//! Fixtures shared by the criterion benches.

use cmpc_core::cmpc::NominalTrajectory;
use cmpc_core::{Cmpc, QpProblem, Scenario};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Strictly convex QP with `d` variables, `d / 4` equalities, `d / 2`
/// inequalities and a box, feasible by construction around a random point.
pub fn random_qp(d: usize, seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let m = gauss(d, d);
    let h = &m * m.transpose() + DMatrix::identity(d, d);
    let f = gauss(d, 1).column(0).into_owned();
    let z0 = gauss(d, 1).column(0).into_owned();
    let a_eq = gauss(d / 4, d);
    let b_eq = &a_eq * &z0;
    let a_in = gauss(d / 2, d);
    let b_in = &a_in * &z0 + DVector::from_element(d / 2, 0.5);
    QpProblem::new(h, f)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, b_in)
        .with_bounds(DVector::from_element(d, -2.0), DVector::from_element(d, 2.0))
}

/// The bundled scenario with its prediction horizon replaced.
pub fn paper_scenario(horizon: usize) -> Scenario {
    let mut s = Scenario::paper_sec5();
    s.cmpc.horizon = horizon;
    s
}

/// Controller, initial states and zero-input nominal at `t = 0`.
pub fn paper_start(horizon: usize) -> (Cmpc, Vec<DVector<f64>>, NominalTrajectory) {
    let s = paper_scenario(horizon);
    let controller = s.controller().expect("bundled scenario is valid");
    let x0 = s.initial_states().expect("bundled scenario is valid");
    let nominal = NominalTrajectory::zero_input(controller.model(), &x0, horizon).expect("rollout");
    (controller, x0, nominal)
}

/// First SQP subproblem of the bundled scenario.
pub fn paper_qp(horizon: usize) -> QpProblem {
    let (controller, x0, nominal) = paper_start(horizon);
    controller.assemble_qp(&x0, &nominal).expect("assembly").problem
}
