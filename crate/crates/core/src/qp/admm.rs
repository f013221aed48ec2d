use super::ldl::SparseLdl;
use super::sparse::{inf_norm, Csr};
use super::{residuals_from, KktResiduals, Products, QpError, QpProblem, QpSettings, QpSolution, QpStatus, WarmStart};
use nalgebra::DVector;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;
const POLISH_DELTA: f64 = 1e-6;
const POLISH_ROUNDS: usize = 12;
const REFINE_STEPS: usize = 25;

/// Stateful ADMM solver. Keeps the symbolic KKT analysis between calls so
/// repeated solves with the same sparsity pattern skip the ordering step.
#[derive(Debug, Clone)]
pub struct QpSolver {
    settings: QpSettings,
    cached: Option<CachedFactor>,
}

#[derive(Debug, Clone)]
struct CachedFactor {
    rows: Vec<usize>,
    cols: Vec<usize>,
    ldl: SparseLdl,
}

/// Problem in solver form: `min 1/2 x'Px + q'x, l <= Ax <= u`, after Ruiz
/// equilibration `P = c D P0 D`, `A = E A0 D`.
struct Scaled {
    n: usize,
    m: usize,
    p: Csr,
    q: Vec<f64>,
    a: Csr,
    l: Vec<f64>,
    u: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
    n_eq: usize,
    n_in: usize,
    /// Variable constrained by each bound row.
    bound_vars: Vec<usize>,
    /// Unscaled copies for the final KKT check.
    p0: Csr,
    a_eq0: Csr,
    a_in0: Csr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Active {
    Inactive,
    Lower,
    Upper,
    Equality,
}

struct Residuals {
    prim: f64,
    dual: f64,
    prim_norm: f64,
    dual_norm: f64,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings, cached: None }
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn solve(&mut self, problem: &QpProblem, warm: Option<&WarmStart>) -> Result<QpSolution, QpError> {
        problem.validate()?;
        if let Some(w) = warm {
            if w.z.len() != problem.dim() {
                return Err(QpError::Dimension(format!(
                    "warm start has dimension {}, problem {}",
                    w.z.len(),
                    problem.dim()
                )));
            }
        }
        let s = self.settings.clone();
        let mut data = Scaled::build(problem);
        data.equilibrate(s.scaling_iters);
        let (n, m) = (data.n, data.m);

        let mut rho = s.rho;
        let mut rho_vec = data.rho_vector(rho);

        // Upper triangle of [P + sigma I, A'; A, -diag(1/rho)].
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            let mut has_diag = false;
            for (j, v) in data.p.row(i) {
                if j >= i {
                    rows.push(i);
                    cols.push(j);
                    vals.push(if j == i { v + s.sigma } else { v });
                    has_diag |= j == i;
                }
            }
            if !has_diag {
                rows.push(i);
                cols.push(i);
                vals.push(s.sigma);
            }
        }
        for r in 0..m {
            for (j, v) in data.a.row(r) {
                rows.push(j);
                cols.push(n + r);
                vals.push(v);
            }
        }
        let rho_slot = vals.len();
        for (r, rv) in rho_vec.iter().enumerate() {
            rows.push(n + r);
            cols.push(n + r);
            vals.push(-1.0 / rv);
        }
        let mut ldl = self.take_factor(n + m, rows, cols)?;
        ldl.factor(&vals)?;

        let mut x = vec![0.0; n];
        let mut z = vec![0.0; m];
        let mut y = vec![0.0; m];
        if let Some(w) = warm {
            for i in 0..n {
                x[i] = w.z[i] / data.d[i];
            }
            data.a.mul(&x, &mut z);
            if let Some(duals) = &w.duals {
                if let Some(stacked) = data.stack_duals(duals) {
                    for r in 0..m {
                        y[r] = stacked[r] * data.c / data.e[r];
                    }
                }
            }
            for r in 0..m {
                z[r] = z[r].clamp(data.l[r], data.u[r]);
            }
        }

        let mut rhs = vec![0.0; n + m];
        let mut xt = vec![0.0; n];
        let mut y_prev = vec![0.0; m];
        let mut polish_tol = 1e-3;
        let mut last_iter = 0;
        let mut infeasible = false;

        for iter in 1..=s.max_iter {
            last_iter = iter;
            y_prev.copy_from_slice(&y);
            for i in 0..n {
                rhs[i] = s.sigma * x[i] - data.q[i];
            }
            for r in 0..m {
                rhs[n + r] = z[r] - y[r] / rho_vec[r];
            }
            ldl.solve(&mut rhs);
            xt.copy_from_slice(&rhs[..n]);
            for i in 0..n {
                x[i] = s.alpha * xt[i] + (1.0 - s.alpha) * x[i];
            }
            for r in 0..m {
                let zt = z[r] + (rhs[n + r] - y[r]) / rho_vec[r];
                let relaxed = s.alpha * zt + (1.0 - s.alpha) * z[r];
                let znew = (relaxed + y[r] / rho_vec[r]).clamp(data.l[r], data.u[r]);
                y[r] += rho_vec[r] * (relaxed - znew);
                z[r] = znew;
            }

            if iter % s.check_interval != 0 && iter != s.max_iter {
                continue;
            }
            let res = data.residuals(&x, &z, &y);
            if res.prim <= s.eps_pri && res.dual <= s.eps_dual {
                let sol = data.unscale(problem, &x, &y, iter, false);
                let checked = data.classify(problem, sol, &s);
                if checked.status == QpStatus::Optimal {
                    return Ok(checked);
                }
            }
            if s.polish
                && res.prim <= polish_tol * (1.0 + res.prim_norm)
                && res.dual <= polish_tol * (1.0 + res.dual_norm)
            {
                if let Some((px, py)) = data.polish(&x, &z, &y, &s) {
                    let sol = data.classify(problem, data.unscale(problem, &px, &py, iter, true), &s);
                    if sol.status == QpStatus::Optimal {
                        return Ok(sol);
                    }
                }
                polish_tol = (polish_tol * 0.1).max(1e-10);
            }
            if iter >= s.infeasibility_after && data.primal_infeasible(&y, &y_prev, s.eps_infeasible) {
                infeasible = true;
                break;
            }
            let ratio = (res.prim / res.prim_norm.max(1e-30)) / (res.dual / res.dual_norm.max(1e-30)).max(1e-30);
            if ratio.is_finite() && (ratio > s.adaptive_rho_ratio || ratio < 1.0 / s.adaptive_rho_ratio) {
                let new_rho = (rho * ratio.sqrt()).clamp(RHO_MIN, RHO_MAX);
                if new_rho != rho {
                    rho = new_rho;
                    rho_vec = data.rho_vector(rho);
                    for (r, rv) in rho_vec.iter().enumerate() {
                        vals[rho_slot + r] = -1.0 / rv;
                    }
                    ldl.factor(&vals)?;
                }
            }
        }

        let mut sol = data.unscale(problem, &x, &y, last_iter, false);
        if infeasible {
            sol.status = QpStatus::PrimalInfeasible;
        } else {
            if s.polish {
                if let Some((px, py)) = data.polish(&x, &z, &y, &s) {
                    let polished = data.classify(problem, data.unscale(problem, &px, &py, last_iter, true), &s);
                    if polished.status == QpStatus::Optimal {
                        return Ok(polished);
                    }
                }
            }
            sol = data.classify(problem, sol, &s);
            if sol.status != QpStatus::Optimal {
                sol.status = QpStatus::MaxIterations;
            }
        }
        Ok(sol)
    }

    fn take_factor(&mut self, dim: usize, rows: Vec<usize>, cols: Vec<usize>) -> Result<SparseLdl, QpError> {
        match &self.cached {
            Some(c) if c.rows == rows && c.cols == cols => Ok(c.ldl.clone()),
            _ => {
                let ldl = SparseLdl::analyze(dim, &rows, &cols)?;
                self.cached = Some(CachedFactor {
                    rows,
                    cols,
                    ldl: ldl.clone(),
                });
                Ok(ldl)
            }
        }
    }
}

impl Scaled {
    /// Sets `r_pri`, `r_dual` and the status: `Optimal` iff both residuals
    /// meet the configured tolerances.
    fn classify(&self, problem: &QpProblem, mut sol: QpSolution, s: &QpSettings) -> QpSolution {
        let k = self.kkt(problem, &sol);
        sol.r_pri = k.r_pri;
        sol.r_dual = k.r_dual;
        sol.status = if k.r_pri <= s.eps_pri && k.r_dual <= s.eps_dual {
            QpStatus::Optimal
        } else {
            QpStatus::MaxIterations
        };
        sol
    }

    /// Same quantities as `kkt_residuals`, with sparse products.
    fn kkt(&self, problem: &QpProblem, sol: &QpSolution) -> KktResiduals {
        let mul = |a: &Csr, v: &[f64], len: usize| {
            let mut out = vec![0.0; len];
            a.mul(v, &mut out);
            DVector::from_vec(out)
        };
        let tr_mul = |a: &Csr, v: &[f64]| {
            let mut out = vec![0.0; self.n];
            a.tr_mul(v, &mut out);
            DVector::from_vec(out)
        };
        let z = sol.z.as_slice();
        let products = Products {
            hz: mul(&self.p0, z, self.n),
            eq: mul(&self.a_eq0, z, self.n_eq),
            ineq: mul(&self.a_in0, z, self.n_in),
            eq_t: tr_mul(&self.a_eq0, sol.eq_duals.as_slice()),
            ineq_t: tr_mul(&self.a_in0, sol.ineq_duals.as_slice()),
        };
        residuals_from(problem, sol, products)
    }

    fn build(problem: &QpProblem) -> Self {
        let n = problem.dim();
        let p = Csr::symmetric_part(&problem.h);
        let a_eq0 = Csr::from_dense(&problem.a_eq);
        let a_in0 = Csr::from_dense(&problem.a_in);
        let mut a = a_eq0.clone();
        a.append(&a_in0);
        let mut l: Vec<f64> = problem.b_eq.iter().copied().collect();
        let mut u = l.clone();
        l.extend(std::iter::repeat_n(f64::NEG_INFINITY, problem.b_in.len()));
        u.extend(problem.b_in.iter().copied());
        let mut bound_vars = Vec::new();
        for j in 0..n {
            if problem.lb[j].is_finite() || problem.ub[j].is_finite() {
                a.push_row([(j, 1.0)]);
                l.push(problem.lb[j]);
                u.push(problem.ub[j]);
                bound_vars.push(j);
            }
        }
        let m = a.nrows;
        Self {
            n,
            m,
            p0: p.clone(),
            a_eq0,
            a_in0,
            p,
            q: problem.f.as_slice().to_vec(),
            a,
            l,
            u,
            d: vec![1.0; n],
            e: vec![1.0; m],
            c: 1.0,
            n_eq: problem.a_eq.nrows(),
            n_in: problem.a_in.nrows(),
            bound_vars,
        }
    }

    /// Modified Ruiz equilibration of the KKT matrix plus cost scaling.
    fn equilibrate(&mut self, iters: usize) {
        let clamp_scale = |nrm: f64| {
            if nrm < SCALE_MIN {
                1.0
            } else {
                1.0 / nrm.min(SCALE_MAX).sqrt()
            }
        };
        for _ in 0..iters {
            let p_norms = self.p.col_inf_norms();
            let a_cols = self.a.col_inf_norms();
            let dx: Vec<f64> = (0..self.n).map(|j| clamp_scale(p_norms[j].max(a_cols[j]))).collect();
            let dz: Vec<f64> = self.a.row_inf_norms().into_iter().map(clamp_scale).collect();
            self.p.scale(&dx, &dx);
            self.a.scale(&dz, &dx);
            for j in 0..self.n {
                self.q[j] *= dx[j];
                self.d[j] *= dx[j];
            }
            for r in 0..self.m {
                self.e[r] *= dz[r];
            }

            let p_norms = self.p.col_inf_norms();
            let mean = if self.n > 0 {
                p_norms.iter().sum::<f64>() / self.n as f64
            } else {
                0.0
            };
            let cost = mean.max(inf_norm(&self.q));
            let gamma = if cost < SCALE_MIN {
                1.0
            } else {
                1.0 / cost.min(SCALE_MAX)
            };
            self.p.values.iter_mut().for_each(|v| *v *= gamma);
            self.q.iter_mut().for_each(|v| *v *= gamma);
            self.c *= gamma;
        }
        for r in 0..self.m {
            self.l[r] *= self.e[r];
            self.u[r] *= self.e[r];
        }
    }

    fn rho_vector(&self, rho: f64) -> Vec<f64> {
        (0..self.m)
            .map(|r| {
                if self.l[r] == self.u[r] {
                    (rho * RHO_EQ_FACTOR).min(RHO_MAX)
                } else if self.l[r] == f64::NEG_INFINITY && self.u[r] == f64::INFINITY {
                    RHO_MIN
                } else {
                    rho
                }
            })
            .collect()
    }

    /// Stacks user-facing duals into constraint-row order.
    fn stack_duals(&self, (eq, ineq, bounds): &(DVector<f64>, DVector<f64>, DVector<f64>)) -> Option<Vec<f64>> {
        if eq.len() != self.n_eq || ineq.len() != self.n_in || bounds.len() != self.n {
            return None;
        }
        let mut y = Vec::with_capacity(self.m);
        y.extend(eq.iter());
        y.extend(ineq.iter());
        y.extend(self.bound_vars.iter().map(|&j| bounds[j]));
        Some(y)
    }

    fn residuals(&self, x: &[f64], z: &[f64], y: &[f64]) -> Residuals {
        let mut ax = vec![0.0; self.m];
        self.a.mul(x, &mut ax);
        let mut prim: f64 = 0.0;
        let mut ax_norm: f64 = 0.0;
        let mut z_norm: f64 = 0.0;
        for r in 0..self.m {
            prim = prim.max(((ax[r] - z[r]) / self.e[r]).abs());
            ax_norm = ax_norm.max((ax[r] / self.e[r]).abs());
            z_norm = z_norm.max((z[r] / self.e[r]).abs());
        }
        let mut px = vec![0.0; self.n];
        self.p.mul(x, &mut px);
        let mut aty = vec![0.0; self.n];
        self.a.tr_mul(y, &mut aty);
        let mut dual: f64 = 0.0;
        let (mut px_n, mut aty_n, mut q_n): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for j in 0..self.n {
            let s = 1.0 / (self.c * self.d[j]);
            dual = dual.max(((px[j] + self.q[j] + aty[j]) * s).abs());
            px_n = px_n.max((px[j] * s).abs());
            aty_n = aty_n.max((aty[j] * s).abs());
            q_n = q_n.max((self.q[j] * s).abs());
        }
        Residuals {
            prim,
            dual,
            prim_norm: ax_norm.max(z_norm),
            dual_norm: px_n.max(aty_n).max(q_n),
        }
    }

    /// Certificate test on the dual increment: `A' dy ~ 0` with
    /// `u' max(dy, 0) + l' min(dy, 0) < 0`.
    fn primal_infeasible(&self, y: &[f64], y_prev: &[f64], eps: f64) -> bool {
        if self.m == 0 {
            return false;
        }
        let dy: Vec<f64> = y.iter().zip(y_prev).map(|(a, b)| a - b).collect();
        let dy_norm = dy
            .iter()
            .zip(&self.e)
            .fold(0.0f64, |acc, (v, e)| acc.max((v * e).abs()));
        if dy_norm < 1e-30 {
            return false;
        }
        let mut support = 0.0;
        for r in 0..self.m {
            if dy[r] > 0.0 {
                if self.u[r] == f64::INFINITY {
                    return false;
                }
                support += self.u[r] * dy[r];
            } else if dy[r] < 0.0 {
                if self.l[r] == f64::NEG_INFINITY {
                    return false;
                }
                support += self.l[r] * dy[r];
            }
        }
        let mut aty = vec![0.0; self.n];
        self.a.tr_mul(&dy, &mut aty);
        let aty_norm = aty
            .iter()
            .zip(&self.d)
            .fold(0.0f64, |acc, (v, d)| acc.max((v / d).abs()));
        aty_norm <= eps * dy_norm && support <= -eps * dy_norm
    }

    fn unscale(&self, problem: &QpProblem, x: &[f64], y: &[f64], iterations: usize, polished: bool) -> QpSolution {
        let z = DVector::from_fn(self.n, |j, _| x[j] * self.d[j]);
        let yu: Vec<f64> = (0..self.m).map(|r| y[r] * self.e[r] / self.c).collect();
        let eq_duals = DVector::from_column_slice(&yu[..self.n_eq]);
        let ineq_duals = DVector::from_column_slice(&yu[self.n_eq..self.n_eq + self.n_in]);
        let mut bound_duals = DVector::zeros(self.n);
        for (k, &j) in self.bound_vars.iter().enumerate() {
            bound_duals[j] = yu[self.n_eq + self.n_in + k];
        }
        debug_assert_eq!(problem.dim(), self.n);
        QpSolution {
            z,
            eq_duals,
            ineq_duals,
            bound_duals,
            status: QpStatus::MaxIterations,
            iterations,
            r_pri: f64::INFINITY,
            r_dual: f64::INFINITY,
            polished,
        }
    }

    /// Guess the active set from the ADMM iterate, solve the equality
    /// constrained KKT system exactly and correct the guess a few times.
    fn polish(&self, x: &[f64], z: &[f64], y: &[f64], s: &QpSettings) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut active: Vec<Active> = (0..self.m)
            .map(|r| {
                if self.l[r] == self.u[r] {
                    Active::Equality
                } else if self.l[r].is_finite() && z[r] - self.l[r] < -y[r] {
                    Active::Lower
                } else if self.u[r].is_finite() && self.u[r] - z[r] < y[r] {
                    Active::Upper
                } else {
                    Active::Inactive
                }
            })
            .collect();

        let mut px = x.to_vec();
        for _ in 0..POLISH_ROUNDS {
            let (xs, ys) = self.solve_active(&active, &px)?;
            let mut ax = vec![0.0; self.m];
            self.a.mul(&xs, &mut ax);
            let mut changed = false;
            for r in 0..self.m {
                let scale = 1.0 / self.e[r];
                match active[r] {
                    Active::Inactive => {
                        if (self.l[r] - ax[r]) * scale > 0.5 * s.eps_pri {
                            active[r] = Active::Lower;
                            changed = true;
                        } else if (ax[r] - self.u[r]) * scale > 0.5 * s.eps_pri {
                            active[r] = Active::Upper;
                            changed = true;
                        }
                    }
                    Active::Lower => {
                        if ys[r] * self.e[r] / self.c > 0.5 * s.eps_dual {
                            active[r] = Active::Inactive;
                            changed = true;
                        }
                    }
                    Active::Upper => {
                        if ys[r] * self.e[r] / self.c < -0.5 * s.eps_dual {
                            active[r] = Active::Inactive;
                            changed = true;
                        }
                    }
                    Active::Equality => {}
                }
            }
            if !changed {
                return Some((xs, ys));
            }
            px = xs;
        }
        None
    }

    fn solve_active(&self, active: &[Active], _start: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let act: Vec<usize> = (0..self.m).filter(|&r| active[r] != Active::Inactive).collect();
        let k = act.len();
        let dim = n + k;
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            let mut has_diag = false;
            for (j, v) in self.p.row(i) {
                if j >= i {
                    rows.push(i);
                    cols.push(j);
                    vals.push(if j == i { v + POLISH_DELTA } else { v });
                    has_diag |= j == i;
                }
            }
            if !has_diag {
                rows.push(i);
                cols.push(i);
                vals.push(POLISH_DELTA);
            }
        }
        for (t, &r) in act.iter().enumerate() {
            for (j, v) in self.a.row(r) {
                rows.push(j);
                cols.push(n + t);
                vals.push(v);
            }
            rows.push(n + t);
            cols.push(n + t);
            vals.push(-POLISH_DELTA);
        }
        let mut ldl = SparseLdl::analyze(dim, &rows, &cols).ok()?;
        ldl.factor(&vals).ok()?;

        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            rhs[i] = -self.q[i];
        }
        for (t, &r) in act.iter().enumerate() {
            rhs[n + t] = match active[r] {
                Active::Upper => self.u[r],
                _ => self.l[r],
            };
        }
        let mut sol = rhs.clone();
        ldl.solve(&mut sol);

        // Iterative refinement against the unregularized KKT matrix.
        let rhs_norm = inf_norm(&rhs);
        let mut resid = vec![0.0; dim];
        for _ in 0..REFINE_STEPS {
            self.kkt_mul(&act, &sol, &mut resid);
            for i in 0..dim {
                resid[i] = rhs[i] - resid[i];
            }
            if inf_norm(&resid) <= 1e-14 * (1.0 + rhs_norm) {
                break;
            }
            ldl.solve(&mut resid);
            for i in 0..dim {
                sol[i] += resid[i];
            }
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let xs = sol[..n].to_vec();
        let mut ys = vec![0.0; self.m];
        for (t, &r) in act.iter().enumerate() {
            ys[r] = sol[n + t];
        }
        Some((xs, ys))
    }

    /// `out = [P A_act'; A_act 0] v`.
    fn kkt_mul(&self, act: &[usize], v: &[f64], out: &mut [f64]) {
        let n = self.n;
        self.p.mul(&v[..n], &mut out[..n]);
        for (t, &r) in act.iter().enumerate() {
            let mut acc = 0.0;
            for (j, a) in self.a.row(r) {
                out[j] += a * v[n + t];
                acc += a * v[j];
            }
            out[n + t] = acc;
        }
    }
}
