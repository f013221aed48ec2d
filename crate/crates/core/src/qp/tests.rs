use super::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INF: f64 = f64::INFINITY;

fn settings() -> QpSettings {
    QpSettings::default()
}

fn assert_optimal(p: &QpProblem, s: &QpSolution, tol: f64) {
    assert_eq!(s.status, QpStatus::Optimal, "r_pri {} r_dual {}", s.r_pri, s.r_dual);
    let k = kkt_residuals(p, s);
    assert!(k.r_pri <= tol, "r_pri {}", k.r_pri);
    assert!(k.r_dual <= tol, "r_dual {}", k.r_dual);
    assert!(k.complementarity <= tol, "complementarity {}", k.complementarity);
}

#[test]
fn unconstrained_minimum() {
    // (z1-1)^2 + (z2-2)^2 = 1/2 z'(2I)z - (2, 4)'z + const
    let p = QpProblem::new(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-2.0, -4.0]));
    let s = solve(&p, None, &settings()).unwrap();
    assert_optimal(&p, &s, 1e-8);
    assert!((s.z[0] - 1.0).abs() <= 1e-8 && (s.z[1] - 2.0).abs() <= 1e-8, "{}", s.z);
}

#[test]
fn equality_by_symmetry() {
    let p = QpProblem::new(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2))
        .with_equalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![2.0]));
    let s = solve(&p, None, &settings()).unwrap();
    assert_optimal(&p, &s, 1e-8);
    assert!((s.z[0] - 1.0).abs() <= 1e-8 && (s.z[1] - 1.0).abs() <= 1e-8, "{}", s.z);
    assert!((s.eq_duals[0] + 2.0).abs() <= 1e-8);
}

#[test]
fn single_active_inequality_and_bound() {
    // min z^2 s.t. z >= 2, once as a row and once as a bound.
    let h = DMatrix::from_element(1, 1, 2.0);
    let row = QpProblem::new(h.clone(), DVector::zeros(1))
        .with_inequalities(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, -2.0));
    let s = solve(&row, None, &settings()).unwrap();
    assert_optimal(&row, &s, 1e-8);
    assert!((s.z[0] - 2.0).abs() <= 1e-8);
    assert!((s.ineq_duals[0] - 4.0).abs() <= 1e-8);

    let bound =
        QpProblem::new(h, DVector::zeros(1)).with_bounds(DVector::from_element(1, 2.0), DVector::from_element(1, INF));
    let s = solve(&bound, None, &settings()).unwrap();
    assert_optimal(&bound, &s, 1e-8);
    assert!((s.z[0] - 2.0).abs() <= 1e-8);
    assert!((s.bound_duals[0] + 4.0).abs() <= 1e-8);
}

fn hand_kkt_problem() -> (QpProblem, QpSolution) {
    let p = QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1))
        .with_inequalities(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, -2.0));
    let s = QpSolution {
        z: DVector::from_element(1, 2.0),
        eq_duals: DVector::zeros(0),
        ineq_duals: DVector::from_element(1, 4.0),
        bound_duals: DVector::zeros(1),
        status: QpStatus::Optimal,
        iterations: 0,
        r_pri: 0.0,
        r_dual: 0.0,
        polished: false,
    };
    (p, s)
}

#[test]
fn hand_kkt_point_has_zero_residuals() {
    let (p, s) = hand_kkt_problem();
    let k = kkt_residuals(&p, &s);
    assert!(
        k.r_pri <= 1e-12 && k.r_dual <= 1e-12 && k.complementarity <= 1e-12,
        "{k:?}"
    );
}

#[test]
fn perturbed_point_raises_dual_residual() {
    let (p, mut s) = hand_kkt_problem();
    s.z[0] += 1e-3;
    assert!(kkt_residuals(&p, &s).r_dual >= 1e-4);

    // Same check on a solver output of a larger problem.
    let (p, _) = random_problem(&mut ChaCha8Rng::seed_from_u64(3), 12, true);
    let mut s = solve(&p, None, &settings()).unwrap();
    assert_optimal(&p, &s, 1e-8);
    s.z[0] += 1e-3;
    assert!(kkt_residuals(&p, &s).r_dual >= 1e-4);
}

#[test]
fn negative_multiplier_counts_as_dual_residual() {
    let (p, mut s) = hand_kkt_problem();
    s.ineq_duals[0] = -0.5;
    s.z[0] = -0.25; // stationary for the wrong-sign multiplier
    assert!(kkt_residuals(&p, &s).r_dual >= 0.5);
}

/// Random strictly convex problem with a known interior-feasible point.
/// Returns the problem and the feasible point.
fn random_problem(rng: &mut ChaCha8Rng, d: usize, with_eq: bool) -> (QpProblem, DVector<f64>) {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let h = m.transpose() * &m + DMatrix::identity(d, d) * rng.random_range(0.05..1.0);
    let f = DVector::from_fn(d, |_, _| rng.random_range(-10.0..10.0));
    let z0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));

    let n_eq = if with_eq { rng.random_range(0..=d / 3) } else { 0 };
    let a_eq = DMatrix::from_fn(n_eq, d, |_, _| rng.random_range(-1.0..1.0));
    let b_eq = &a_eq * &z0;

    let n_in = rng.random_range(0..=d);
    let a_in = DMatrix::from_fn(n_in, d, |_, _| rng.random_range(-1.0..1.0));
    let b_in = &a_in * &z0 + DVector::from_fn(n_in, |_, _| rng.random_range(0.0..1.0));

    let mut lb = DVector::from_element(d, -INF);
    let mut ub = DVector::from_element(d, INF);
    for i in 0..d {
        if rng.random_bool(0.6) {
            lb[i] = z0[i] - rng.random_range(0.0..1.5);
        }
        if rng.random_bool(0.6) {
            ub[i] = z0[i] + rng.random_range(0.0..1.5);
        }
    }
    let p = QpProblem::new(h, f)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, b_in)
        .with_bounds(lb, ub);
    (p, z0)
}

#[test]
fn five_hundred_random_instances_reach_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut solver = QpSolver::new(settings());
    for trial in 0..500 {
        let d = rng.random_range(1..=60);
        let (p, _) = random_problem(&mut rng, d, true);
        let s = solver.solve(&p, None).unwrap();
        assert_eq!(
            s.status,
            QpStatus::Optimal,
            "trial {trial} d {d}: r_pri {} r_dual {}",
            s.r_pri,
            s.r_dual
        );
        let k = kkt_residuals(&p, &s);
        assert!(
            k.r_pri <= 1e-6 && k.r_dual <= 1e-6 && k.complementarity <= 1e-6,
            "trial {trial}: {k:?}"
        );
    }
}

/// Accelerated projected gradient on the dual of
/// `min 1/2 z'Hz + f'z, Gz <= g`, restarted whenever momentum hurts.
fn dual_projected_gradient(h: &DMatrix<f64>, f: &DVector<f64>, g: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let hinv = h.clone().cholesky().unwrap().inverse();
    let q = g * &hinv * g.transpose();
    let c = g * &hinv * f + rhs;
    let step = 1.0 / q.symmetric_eigenvalues().amax();
    let grad = |lam: &DVector<f64>| &q * lam + &c;
    let mut lam = DVector::zeros(g.nrows());
    let mut prev = lam.clone();
    let mut mom = lam.clone();
    let mut t: f64 = 1.0;
    for _ in 0..5_000_000 {
        let next = (&mom - grad(&mom) * step).map(|v| v.max(0.0));
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        if (&mom - &next).dot(&(&next - &lam)) > 0.0 {
            t = 1.0;
            mom = next.clone();
        } else {
            mom = &next + (&next - &lam) * ((t - 1.0) / t_next);
            t = t_next;
        }
        prev.copy_from(&lam);
        lam = next;
        let stat = (&lam - (&lam - grad(&lam)).map(|v| v.max(0.0))).amax();
        if stat <= 1e-10 && (&lam - &prev).amax() <= 1e-12 {
            break;
        }
    }
    let stat = (&lam - (&lam - grad(&lam)).map(|v| v.max(0.0))).amax();
    assert!(stat <= 1e-10, "oracle did not converge: {stat}");
    -(&hinv * (f + g.transpose() * &lam))
}

#[test]
fn matches_projected_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..5 {
        let d = 20;
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let h = m.transpose() * &m + DMatrix::identity(d, d);
        let f = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
        let z0 = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
        let a_in = DMatrix::from_fn(5, d, |_, _| rng.random_range(-1.0..1.0));
        let b_in = &a_in * &z0 + DVector::from_fn(5, |_, _| rng.random_range(0.0..0.5));
        let lb = z0.map(|v| v - rng.random_range(0.2..1.0));
        let ub = z0.map(|v| v + rng.random_range(0.2..1.0));
        let p = QpProblem::new(h.clone(), f.clone())
            .with_inequalities(a_in.clone(), b_in.clone())
            .with_bounds(lb.clone(), ub.clone());
        let s = solve(&p, None, &settings()).unwrap();
        assert_optimal(&p, &s, 1e-8);

        let eye = DMatrix::<f64>::identity(d, d);
        let mut g = DMatrix::zeros(5 + 2 * d, d);
        g.rows_mut(0, 5).copy_from(&a_in);
        g.rows_mut(5, d).copy_from(&eye);
        g.rows_mut(5 + d, d).copy_from(&(-&eye));
        let mut rhs = DVector::zeros(5 + 2 * d);
        rhs.rows_mut(0, 5).copy_from(&b_in);
        rhs.rows_mut(5, d).copy_from(&ub);
        rhs.rows_mut(5 + d, d).copy_from(&(-&lb));
        let oracle = dual_projected_gradient(&h, &f, &g, &rhs);
        assert!((&s.z - &oracle).amax() <= 1e-6, "diff {}", (&s.z - &oracle).amax());
    }
}

#[test]
fn objective_beats_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (p, z0) = random_problem(&mut rng, 8, false);
    let s = solve(&p, None, &settings()).unwrap();
    assert_optimal(&p, &s, 1e-8);
    let best = p.objective(&s.z);
    let feasible = |z: &DVector<f64>| {
        (&p.a_in * z - &p.b_in).iter().all(|v| *v <= 0.0) && (0..z.len()).all(|i| p.lb[i] <= z[i] && z[i] <= p.ub[i])
    };
    let mut checked = 0;
    while checked < 1000 {
        // Points between z0 and a box sample; shrink until feasible.
        let mut cand = DVector::from_fn(8, |i, _| {
            let lo = if p.lb[i].is_finite() { p.lb[i] } else { z0[i] - 3.0 };
            let hi = if p.ub[i].is_finite() { p.ub[i] } else { z0[i] + 3.0 };
            rng.random_range(lo..=hi)
        });
        while !feasible(&cand) {
            cand = (&cand + &z0) * 0.5;
        }
        assert!(best <= p.objective(&cand) + 1e-9);
        checked += 1;
    }
}

#[test]
fn warm_start_does_not_increase_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut fewer_or_equal = 0;
    for _ in 0..100 {
        let d = rng.random_range(5..=40);
        let (p, _) = random_problem(&mut rng, d, true);
        let base = solve(&p, None, &settings()).unwrap();
        assert_eq!(base.status, QpStatus::Optimal);
        let mut perturbed = p.clone();
        for i in 0..d {
            perturbed.f[i] += rng.random_range(-1.0..1.0) * 1e-3 / (d as f64).sqrt();
        }
        assert!((&perturbed.f - &p.f).norm() <= 1e-3);
        let cold = solve(&perturbed, None, &settings()).unwrap();
        let warm = solve(&perturbed, Some(&WarmStart::from(&base)), &settings()).unwrap();
        assert_eq!(warm.status, QpStatus::Optimal);
        if warm.iterations <= cold.iterations {
            fewer_or_equal += 1;
        }
    }
    assert!(fewer_or_equal >= 90, "{fewer_or_equal}/100");
}

#[test]
fn reports_primal_infeasibility() {
    // z1 <= 0 together with z1 >= 1.
    let p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2))
        .with_inequalities(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 0.0),
        )
        .with_bounds(DVector::from_vec(vec![1.0, -INF]), DVector::from_vec(vec![INF, INF]));
    let s = solve(&p, None, &settings()).unwrap();
    assert_eq!(s.status, QpStatus::PrimalInfeasible);

    // Two contradicting equalities.
    let p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2)).with_equalities(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        DVector::from_vec(vec![1.0, 2.0]),
    );
    let s = solve(&p, None, &settings()).unwrap();
    assert_eq!(s.status, QpStatus::PrimalInfeasible);
}

#[test]
fn max_iterations_is_a_status() {
    let (p, _) = random_problem(&mut ChaCha8Rng::seed_from_u64(5), 30, true);
    let tight = QpSettings {
        max_iter: 5,
        polish: false,
        ..settings()
    };
    let s = solve(&p, None, &tight).unwrap();
    assert_eq!(s.status, QpStatus::MaxIterations);
    assert_eq!(s.iterations, 5);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let p = QpProblem::new(DMatrix::identity(3, 3), DVector::zeros(2));
    assert!(matches!(solve(&p, None, &settings()), Err(QpError::Dimension(_))));
    let p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2))
        .with_inequalities(DMatrix::zeros(1, 3), DVector::zeros(1));
    assert!(matches!(solve(&p, None, &settings()), Err(QpError::Dimension(_))));
    let ok = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2));
    let warm = WarmStart {
        z: DVector::zeros(3),
        duals: None,
    };
    assert!(matches!(
        solve(&ok, Some(&warm), &settings()),
        Err(QpError::Dimension(_))
    ));
    let bad = ok
        .clone()
        .with_bounds(DVector::from_element(2, 1.0), DVector::from_element(2, 0.0));
    assert!(matches!(solve(&bad, None, &settings()), Err(QpError::InvalidData(_))));
}

#[test]
fn asymmetric_h_is_symmetrized() {
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 2.0]);
    let p = QpProblem::new(h, DVector::from_vec(vec![-2.0, -4.0]));
    let s = solve(&p, None, &settings()).unwrap();
    assert_optimal(&p, &s, 1e-8);
    assert!((&s.z - DVector::from_vec(vec![1.0, 2.0])).amax() <= 1e-8);
}

#[test]
fn semidefinite_hessian_with_bounds() {
    // Flat direction in z2 resolved by its bounds and linear term.
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let p = QpProblem::new(h, DVector::from_vec(vec![-1.0, 1.0]))
        .with_bounds(DVector::from_vec(vec![-5.0, -3.0]), DVector::from_vec(vec![5.0, 3.0]));
    let s = solve(&p, None, &settings()).unwrap();
    assert_optimal(&p, &s, 1e-8);
    assert!((&s.z - DVector::from_vec(vec![1.0, -3.0])).amax() <= 1e-8, "{}", s.z);
}

#[test]
fn deterministic() {
    let (p, _) = random_problem(&mut ChaCha8Rng::seed_from_u64(9), 25, true);
    let a = solve(&p, None, &settings()).unwrap();
    let b = QpSolver::new(settings()).solve(&p, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cached_solver_matches_fresh_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (p, _) = random_problem(&mut rng, 15, true);
    let mut solver = QpSolver::new(settings());
    let first = solver.solve(&p, None).unwrap();
    let mut q = p.clone();
    q.f *= 0.5;
    let cached = solver.solve(&q, None).unwrap();
    let fresh = solve(&q, None, &settings()).unwrap();
    assert_eq!(first.status, QpStatus::Optimal);
    assert_eq!(cached, fresh);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_status_implies_tolerances(seed in any::<u64>(), d in 1usize..25) {
        let (p, _) = random_problem(&mut ChaCha8Rng::seed_from_u64(seed), d, true);
        let s = solve(&p, None, &settings()).unwrap();
        if s.status == QpStatus::Optimal {
            let k = kkt_residuals(&p, &s);
            prop_assert!(k.r_pri <= 1e-8 && k.r_dual <= 1e-8);
            prop_assert!(s.r_pri <= 1e-8 && s.r_dual <= 1e-8);
        }
    }
}
