//! Convexified safety constraints.
//!
//! A circular keep-out region is replaced, around a nominal position, by the
//! supporting half-plane at the nearest boundary point. The discrete-time
//! high-order barrier recursion `h_l = h_{l-1}(x+) - (1 - gamma_l) h_{l-1}(x)`
//! is then pushed through the local affine model of the dynamics so that
//! every safety condition becomes a single linear inequality in the decision
//! variables plus one slack.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BarrierError {
    #[error("nominal position ({x}, {y}) coincides with the disc center")]
    DegenerateGeometry { x: f64, y: f64 },
    #[error("nominal position is not strictly outside the disc (distance {distance}, radius {radius})")]
    NominalInside { distance: f64, radius: f64 },
    #[error("barrier order {order} is invalid (relative degree {relative_degree})")]
    InvalidOrder { order: usize, relative_degree: usize },
    #[error("invalid barrier parameter: {0}")]
    InvalidParams(String),
    #[error("missing tangent barrier or linearization for prediction step {0}")]
    MissingStep(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularObstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl CircularObstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self, BarrierError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(BarrierError::InvalidParams(format!(
                "obstacle radius must be positive, got {radius}"
            )));
        }
        Ok(Self { center, radius })
    }

    /// `||p - c||^2 - r^2`.
    pub fn squared_margin(&self, p: [f64; 2]) -> f64 {
        squared_margin(p, self.center, self.radius)
    }
}

pub fn squared_margin(p: [f64; 2], center: [f64; 2], radius: f64) -> f64 {
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    dx * dx + dy * dy - radius * radius
}

/// `h(x) = a^T x + b` on the full state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBarrier {
    pub a: DVector<f64>,
    pub b: f64,
}

impl AffineBarrier {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.a.dot(x) + self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    /// `gamma_1 .. gamma_r`, each in `(0, 1]`.
    pub gammas: Vec<f64>,
    pub relative_degree: usize,
    /// Inter-agent safe distance `d`.
    pub safe_distance: f64,
}

impl BarrierParams {
    pub fn new(gammas: Vec<f64>, relative_degree: usize, safe_distance: f64) -> Result<Self, BarrierError> {
        let params = Self {
            gammas,
            relative_degree,
            safe_distance,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), BarrierError> {
        if self.relative_degree < 1 {
            return Err(BarrierError::InvalidParams("relative degree must be >= 1".into()));
        }
        if self.gammas.len() != self.relative_degree {
            return Err(BarrierError::InvalidParams(format!(
                "expected {} gammas, got {}",
                self.relative_degree,
                self.gammas.len()
            )));
        }
        if let Some(g) = self.gammas.iter().find(|&&g| !(g > 0.0 && g <= 1.0)) {
            return Err(BarrierError::InvalidParams(format!("gamma {g} not in (0, 1]")));
        }
        if !(self.safe_distance > 0.0 && self.safe_distance.is_finite()) {
            return Err(BarrierError::InvalidParams(format!(
                "safe distance must be positive, got {}",
                self.safe_distance
            )));
        }
        Ok(())
    }
}

/// Point on the circle closest to `p`.
pub fn nearest_boundary_point(p: [f64; 2], center: [f64; 2], radius: f64) -> Result<[f64; 2], BarrierError> {
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    let dist = dx.hypot(dy);
    if dist == 0.0 {
        return Err(BarrierError::DegenerateGeometry { x: p[0], y: p[1] });
    }
    Ok([center[0] + radius * dx / dist, center[1] + radius * dy / dist])
}

/// Supporting half-plane of a disc at the boundary point nearest to `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentCut {
    pub barrier: AffineBarrier,
    pub tangent_point: [f64; 2],
    /// `p` was inside or on the disc; the cut still points outward.
    pub nominal_inside: bool,
}

/// Builds `h(x) = (x~ - c)^T p - (r^2 - |c|^2 + x~^T c)` over the position
/// components of an `n`-dimensional state. Requires `p` strictly outside
/// the disc.
pub fn tangent_halfplane(
    p: [f64; 2],
    center: [f64; 2],
    radius: f64,
    state_dim: usize,
    position: [usize; 2],
) -> Result<AffineBarrier, BarrierError> {
    let cut = tangent_cut(p, center, radius, state_dim, position)?;
    if cut.nominal_inside {
        let distance = (p[0] - center[0]).hypot(p[1] - center[1]);
        return Err(BarrierError::NominalInside { distance, radius });
    }
    Ok(cut.barrier)
}

/// Like [`tangent_halfplane`] but also accepts a nominal inside the disc,
/// flagging it instead of failing. Only the exact-center case is an error.
pub fn tangent_cut(
    p: [f64; 2],
    center: [f64; 2],
    radius: f64,
    state_dim: usize,
    position: [usize; 2],
) -> Result<TangentCut, BarrierError> {
    let xt = nearest_boundary_point(p, center, radius)?;
    let mut a = DVector::zeros(state_dim);
    a[position[0]] = xt[0] - center[0];
    a[position[1]] = xt[1] - center[1];
    let c_sq = center[0] * center[0] + center[1] * center[1];
    let b = -(radius * radius - c_sq + xt[0] * center[0] + xt[1] * center[1]);
    Ok(TangentCut {
        barrier: AffineBarrier { a, b },
        tangent_point: xt,
        nominal_inside: squared_margin(p, center, radius) <= 0.0,
    })
}

/// Flattening coefficients `Z_{nu,l}` for `nu = 0..=l`.
///
/// `gammas` must hold at least `gamma_1 .. gamma_{l-1}`; extra entries are
/// ignored.
pub fn z_coefficients(l: usize, gammas: &[f64]) -> Result<Vec<f64>, BarrierError> {
    if l < 1 || gammas.len() + 1 < l {
        return Err(BarrierError::InvalidOrder {
            order: l,
            relative_degree: gammas.len(),
        });
    }
    let mut z = vec![0.0; l + 1];
    if l == 1 {
        z[0] = 1.0;
        return Ok(z);
    }
    // Elementary symmetric polynomials of (gamma_zeta - 1), zeta = 1..l-1:
    // esp[s] = sum over size-s subsets of the product.
    let mut esp = vec![0.0; l];
    esp[0] = 1.0;
    for &g in &gammas[..l - 1] {
        for s in (1..l).rev() {
            esp[s] += esp[s - 1] * (g - 1.0);
        }
    }
    for (nu, zv) in z.iter_mut().enumerate().take(l - 1) {
        *zv = esp[l - nu - 1];
    }
    z[l - 1] = -1.0;
    Ok(z)
}

/// Coefficient of `h_0(x(v))` in `h_{l-1}(x(0))` when the recursion is
/// unrolled along a trajectory: `Z_{v,l}` for `v <= l-2` and `1` for
/// `v = l-1`. For `l = 1` this is `[1]`.
pub fn unrolled_coefficients(l: usize, gammas: &[f64]) -> Result<Vec<f64>, BarrierError> {
    let mut z = z_coefficients(l, gammas)?;
    z.truncate(l);
    z[l - 1] = 1.0;
    Ok(z)
}

/// Local affine model `x+ ~ x_next + A (x - x_nom) + B (u - u_nom)` with
/// `x_next = f(x_nom, u_nom)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x_nom: DVector<f64>,
    pub u_nom: DVector<f64>,
    pub x_next: DVector<f64>,
}

impl Linearization {
    /// Constant term `c` of `x+ = A x + B u + c`.
    pub fn offset(&self) -> DVector<f64> {
        &self.x_next - &self.a * &self.x_nom - &self.b * &self.u_nom
    }

    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + self.offset()
    }
}

/// `h(x, u) = x_coef^T x + u_coef^T u + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineForm {
    pub x_coef: DVector<f64>,
    pub u_coef: DVector<f64>,
    pub constant: f64,
}

impl AffineForm {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.x_coef.dot(x) + self.u_coef.dot(u) + self.constant
    }
}

/// Order-`l` barrier `h_l` of an affine `h_0`, with every forward step taken
/// through the affine model in `lin` under a held input `u`.
///
/// `gammas` holds `gamma_1 ..`; at least `l` entries are required.
pub fn dhcbf_affine(
    h0: &AffineBarrier,
    lin: &Linearization,
    gammas: &[f64],
    l: usize,
) -> Result<AffineForm, BarrierError> {
    if l > gammas.len() {
        return Err(BarrierError::InvalidOrder {
            order: l,
            relative_degree: gammas.len(),
        });
    }
    let offset = lin.offset();
    let mut alpha = h0.a.clone();
    let mut beta = DVector::zeros(lin.b.ncols());
    let mut kappa = h0.b;
    for &gamma in &gammas[..l] {
        // h(g(x,u), u) - (1 - gamma) h(x, u), g(x,u) = A x + B u + c.
        let next_alpha = lin.a.tr_mul(&alpha) - &alpha * (1.0 - gamma);
        let next_beta = lin.b.tr_mul(&alpha) + &beta * gamma;
        kappa = alpha.dot(&offset) + gamma * kappa;
        alpha = next_alpha;
        beta = next_beta;
    }
    Ok(AffineForm {
        x_coef: alpha,
        u_coef: beta,
        constant: kappa,
    })
}

/// Which decision quantity a safety-row term multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    /// Predicted state `x(k)`, `k >= 1`.
    State(usize),
    /// Predicted input `u(k)`.
    Input(usize),
}

/// Linear safety condition for one agent:
/// `sum(coef^T var) + constant - slack_coef * w >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyRow {
    pub terms: Vec<(Variable, DVector<f64>)>,
    pub constant: f64,
    pub slack_coef: f64,
}

impl SafetyRow {
    /// Evaluate the left-hand side minus the slack term.
    pub fn residual(&self, states: &[DVector<f64>], inputs: &[DVector<f64>], slack: f64) -> f64 {
        let mut acc = self.constant - self.slack_coef * slack;
        for (var, coef) in &self.terms {
            acc += match *var {
                Variable::State(k) => coef.dot(&states[k]),
                Variable::Input(k) => coef.dot(&inputs[k]),
            };
        }
        acc
    }
}

/// Inputs for [`build_safety_row`] describing one constraint instance of
/// one agent along the horizon.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    /// Tangent barrier computed at the nominal state of each prediction step.
    pub barriers: &'a [AffineBarrier],
    /// Local dynamics model at each prediction step.
    pub linearizations: &'a [Linearization],
    /// `gamma_1 .. gamma_r`.
    pub gammas: &'a [f64],
    /// Measured state `x(0|t)`; not a decision variable.
    pub x0: &'a DVector<f64>,
}

impl RowContext<'_> {
    /// `h_0(x(0|t))` using the step-0 barrier.
    pub fn h0_at_x0(&self) -> f64 {
        self.barriers[0].eval(self.x0)
    }
}

/// Slack-relaxed order-`l` condition at prediction step `k`:
///
/// `h_{l-1}(x(k), u(k)) - d^k sum_{v=1}^{l-1} c_v h_0(x(v)) >= w d^k c_0 h_0(x(0))`
///
/// with `d = 1 - gamma_l`, `c` from [`unrolled_coefficients`] and each
/// `h_0(x(v))` using the tangent barrier built at step `v`. With `w = 1` the
/// condition reads `h_{l-1}(x(k)) >= (1 - gamma_l)^k h_{l-1}(x(0))`.
pub fn build_safety_row(ctx: &RowContext<'_>, l: usize, k: usize) -> Result<SafetyRow, BarrierError> {
    let r = ctx.gammas.len();
    if l < 1 || l > r {
        return Err(BarrierError::InvalidOrder {
            order: l,
            relative_degree: r,
        });
    }
    let needed = k.max(l - 1);
    if ctx.barriers.len() <= needed || ctx.linearizations.len() <= k {
        return Err(BarrierError::MissingStep(needed));
    }
    let coeffs = unrolled_coefficients(l, ctx.gammas)?;
    let decay = (1.0 - ctx.gammas[l - 1]).powi(k as i32);

    let form = dhcbf_affine(&ctx.barriers[k], &ctx.linearizations[k], ctx.gammas, l - 1)?;
    let mut terms = Vec::new();
    let mut constant = form.constant;
    if k == 0 {
        constant += form.x_coef.dot(ctx.x0);
    } else {
        terms.push((Variable::State(k), form.x_coef));
    }
    if l > 1 {
        terms.push((Variable::Input(k), form.u_coef));
    }
    for (v, &c) in coeffs.iter().enumerate().skip(1) {
        let h = &ctx.barriers[v];
        terms.push((Variable::State(v), &h.a * (-decay * c)));
        constant -= decay * c * h.b;
    }
    Ok(SafetyRow {
        terms,
        constant,
        slack_coef: decay * coeffs[0] * ctx.h0_at_x0(),
    })
}

/// Smallest and largest value of `eta^T u` over the input box.
pub fn input_range(eta: &DVector<f64>, u_min: &DVector<f64>, u_max: &DVector<f64>) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for i in 0..eta.len() {
        let pos = eta[i].max(0.0);
        let neg = eta[i].min(0.0);
        lo += neg * u_max[i] + pos * u_min[i];
        hi += pos * u_max[i] + neg * u_min[i];
    }
    (lo, hi)
}

/// Supremum of `coef^T x + constant` over the box `[lo, hi]`, attained at
/// the vertex picked by coefficient signs.
pub fn affine_box_sup(coef: &DVector<f64>, constant: f64, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    coef.iter()
        .zip(lo.iter().zip(hi.iter()))
        .map(|(&c, (&l, &h))| if c >= 0.0 { c * h } else { c * l })
        .sum::<f64>()
        + constant
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn nearest_point_examples() {
        assert_eq!(
            nearest_boundary_point([0.0, 0.0], [-2.0, 0.0], 1.0).unwrap(),
            [-1.0, 0.0]
        );
        assert_eq!(
            nearest_boundary_point([-1.0, 0.0], [-2.0, 0.0], 1.0).unwrap(),
            [-1.0, 0.0]
        );
        assert_eq!(
            nearest_boundary_point([-2.0, 2.0], [-2.0, 0.0], 1.0).unwrap(),
            [-2.0, 1.0]
        );
        assert!(matches!(
            nearest_boundary_point([-2.0, 0.0], [-2.0, 0.0], 1.0),
            Err(BarrierError::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn tangent_halfplane_example() {
        let h = tangent_halfplane([0.0, 0.0], [-2.0, 0.0], 1.0, 4, [0, 1]).unwrap();
        assert_eq!(h.a, dv(&[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(h.b, 1.0);
        assert_eq!(h.eval(&dv(&[-1.0, 5.0, 0.3, 2.0])), 0.0);
    }

    #[test]
    fn tangent_halfplane_rejects_inside_and_flags_cut() {
        assert!(matches!(
            tangent_halfplane([-1.5, 0.0], [-2.0, 0.0], 1.0, 4, [0, 1]),
            Err(BarrierError::NominalInside { .. })
        ));
        assert!(matches!(
            tangent_halfplane([-1.0, 0.0], [-2.0, 0.0], 1.0, 4, [0, 1]),
            Err(BarrierError::NominalInside { .. })
        ));
        let cut = tangent_cut([-1.5, 0.0], [-2.0, 0.0], 1.0, 4, [0, 1]).unwrap();
        assert!(cut.nominal_inside);
        assert_eq!(cut.tangent_point, [-1.0, 0.0]);
        // Outward normal: the inside nominal violates the cut.
        assert!(cut.barrier.eval(&dv(&[-1.5, 0.0, 0.0, 0.0])) < 0.0);
    }

    #[test]
    fn tangent_point_is_on_zero_level_and_nominal_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let c = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let r = rng.random_range(0.05..2.0);
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = r + rng.random_range(1e-3..5.0);
            let p = [c[0] + dist * ang.cos(), c[1] + dist * ang.sin()];
            let cut = tangent_cut(p, c, r, 2, [0, 1]).unwrap();
            let xt = cut.tangent_point;
            assert!(cut.barrier.eval(&dv(&xt)).abs() <= 1e-12);
            assert!(cut.barrier.eval(&dv(&p)) > 0.0);
        }
    }

    #[test]
    fn z_coefficient_examples() {
        let g = [0.3, 0.6, 0.8];
        assert_eq!(z_coefficients(1, &g).unwrap(), vec![1.0, 0.0]);
        assert_eq!(z_coefficients(2, &g).unwrap(), vec![0.3 - 1.0, -1.0, 0.0]);
        let z3 = z_coefficients(3, &g).unwrap();
        // Subset enumeration over {1, 2}.
        assert!((z3[0] - (0.3 - 1.0) * (0.6 - 1.0)).abs() < 1e-15);
        assert!((z3[1] - ((0.3 - 1.0) + (0.6 - 1.0))).abs() < 1e-15);
        assert_eq!(&z3[2..], &[-1.0, 0.0]);
        assert!(z_coefficients(0, &g).is_err());
        assert!(z_coefficients(3, &[0.5]).is_err());
    }

    /// Brute-force Z over explicit subsets.
    fn z_by_subsets(l: usize, gammas: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; l + 1];
        if l == 1 {
            z[0] = 1.0;
            return z;
        }
        for mask in 0u32..(1 << (l - 1)) {
            let size = mask.count_ones() as usize;
            if size == 0 {
                continue;
            }
            let prod: f64 = (0..l - 1)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| gammas[b] - 1.0)
                .product();
            z[l - 1 - size] += prod;
        }
        z[l - 1] = -1.0;
        z
    }

    #[test]
    fn z_matches_subset_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in 1..=6 {
            for _ in 0..20 {
                let g: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..=1.0)).collect();
                let fast = z_coefficients(l, &g).unwrap();
                let slow = z_by_subsets(l, &g);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    fn scalar_lin(a: f64, b: f64, x_nom: f64, u_nom: f64, x_next: f64) -> Linearization {
        Linearization {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            x_nom: dv(&[x_nom]),
            u_nom: dv(&[u_nom]),
            x_next: dv(&[x_next]),
        }
    }

    #[test]
    fn dhcbf_scalar_toy() {
        // f(x, u) = x + u exactly, h0(x) = x, gamma_1 = 0.5.
        let lin = scalar_lin(1.0, 1.0, 0.0, 0.0, 0.0);
        let h0 = AffineBarrier { a: dv(&[1.0]), b: 0.0 };
        let form = dhcbf_affine(&h0, &lin, &[0.5], 1).unwrap();
        assert_eq!(form.x_coef, dv(&[0.5]));
        assert_eq!(form.u_coef, dv(&[1.0]));
        assert_eq!(form.constant, 0.0);
        assert!(dhcbf_affine(&h0, &lin, &[0.5], 2).is_err());
    }

    #[test]
    fn dhcbf_unit_gamma_is_barrier_at_next_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4;
        let m = 2;
        let lin = Linearization {
            a: DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)),
            b: DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)),
            x_nom: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            u_nom: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            x_next: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        };
        let h0 = AffineBarrier {
            a: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            b: 0.3,
        };
        let form = dhcbf_affine(&h0, &lin, &[1.0], 1).unwrap();
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let direct = h0.eval(&lin.predict(&x, &u));
        assert!((form.eval(&x, &u) - direct).abs() < 1e-12);
    }

    /// Evaluates `h_l(x, u)` by literally applying the recursion with
    /// function calls on the affine model.
    fn recursive_h(
        h0: &AffineBarrier,
        lin: &Linearization,
        gammas: &[f64],
        l: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> f64 {
        if l == 0 {
            return h0.eval(x);
        }
        let next = lin.predict(x, u);
        let prev_next = recursive_h(h0, lin, gammas, l - 1, &next, u);
        let prev_here = recursive_h(h0, lin, gammas, l - 1, x, u);
        prev_next - prev_here + gammas[l - 1] * prev_here
    }

    #[test]
    fn dhcbf_matches_direct_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=3);
            let lin = Linearization {
                a: DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)),
                b: DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)),
                x_nom: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                u_nom: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
                x_next: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            };
            let h0 = AffineBarrier {
                a: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                b: rng.random_range(-1.0..1.0),
            };
            let gammas: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..=1.0)).collect();
            let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            for l in 0..=4 {
                let form = dhcbf_affine(&h0, &lin, &gammas, l).unwrap();
                let direct = recursive_h(&h0, &lin, &gammas, l, &x, &u);
                assert!((form.eval(&x, &u) - direct).abs() < 1e-12, "l={l}");
            }
        }
    }

    /// Unrolling the recursion of order l-1 at x(0) along a scalar linear
    /// trajectory must reproduce the directly iterated value.
    #[test]
    fn unrolled_coefficients_reproduce_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for l in 1..=4 {
            for _ in 0..100 {
                let gammas: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..=1.0)).collect();
                let a = rng.random_range(-1.5..1.5);
                let b = rng.random_range(-1.0..1.0);
                let x0: f64 = rng.random_range(-2.0..2.0);
                let u: f64 = rng.random_range(-1.0..1.0);
                // h0(x) = x on x(v+1) = a x(v) + b u.
                let mut traj = vec![x0];
                for v in 0..l {
                    traj.push(a * traj[v] + b * u);
                }
                // Direct: h_j(x(v)) = h_{j-1}(x(v+1)) - (1 - gamma_j) h_{j-1}(x(v)).
                let mut level: Vec<f64> = traj.clone();
                for &g in gammas.iter().take(l - 1) {
                    level = (0..level.len() - 1)
                        .map(|v| level[v + 1] - (1.0 - g) * level[v])
                        .collect();
                }
                let direct = level[0];
                let c = unrolled_coefficients(l, &gammas).unwrap();
                let expanded: f64 = c.iter().zip(&traj).map(|(c, h)| c * h).sum();
                assert!((direct - expanded).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn safety_row_order_one_at_step_zero() {
        let lin = scalar_lin(1.0, 1.0, 2.0, 0.0, 2.0);
        let barriers = vec![AffineBarrier { a: dv(&[1.0]), b: 0.0 }; 3];
        let lins = vec![lin; 3];
        let x0 = dv(&[2.0]);
        let ctx = RowContext {
            barriers: &barriers,
            linearizations: &lins,
            gammas: &[0.3, 0.3],
            x0: &x0,
        };
        let row = build_safety_row(&ctx, 1, 0).unwrap();
        assert!(row.terms.is_empty());
        assert_eq!(row.constant, 2.0);
        assert_eq!(row.slack_coef, ctx.h0_at_x0());
    }

    #[test]
    fn safety_row_order_two_step_one() {
        // Two-dimensional toy so that h_1 and h_0 differ structurally.
        let lin = Linearization {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            x_nom: dv(&[1.0, 0.5]),
            u_nom: dv(&[0.2]),
            x_next: dv(&[1.05, 0.52]),
        };
        let barriers: Vec<AffineBarrier> = (0..3)
            .map(|v| AffineBarrier {
                a: dv(&[1.0 + v as f64, -0.5]),
                b: 0.25 * v as f64,
            })
            .collect();
        let lins = vec![lin.clone(); 3];
        let x0 = dv(&[0.8, 0.1]);
        let gammas = [0.4, 0.3];
        let ctx = RowContext {
            barriers: &barriers,
            linearizations: &lins,
            gammas: &gammas,
            x0: &x0,
        };
        let row = build_safety_row(&ctx, 2, 1).unwrap();
        let h0_x0 = barriers[0].eval(&x0);
        assert!((row.slack_coef - (0.4 - 1.0) * 0.7 * h0_x0).abs() < 1e-15);

        // Expected: h_1(x(1), u(1)) - 0.7 h0^{(1)}(x(1)) at arbitrary values.
        let states = vec![x0.clone(), dv(&[0.3, -0.7]), dv(&[0.0, 0.0])];
        let inputs = vec![dv(&[0.0]), dv(&[0.9])];
        let h1 = dhcbf_affine(&barriers[1], &lin, &gammas, 1).unwrap();
        let expected = h1.eval(&states[1], &inputs[1]) - 0.7 * barriers[1].eval(&states[1]);
        let w = 0.37;
        let got = row.residual(&states, &inputs, w);
        assert!((got - (expected - w * row.slack_coef)).abs() < 1e-12);
    }

    #[test]
    fn safety_row_at_nominal_equals_recursion_margin() {
        // Scalar exact-linear plant x+ = a x + b u, constant nominal input.
        let (a, b, u) = (0.9, 0.5, 0.3);
        let gammas = [0.4, 0.25, 0.6];
        let horizon = 6;
        let mut states = vec![dv(&[1.7])];
        for k in 0..horizon {
            let x: f64 = states[k][0];
            states.push(dv(&[a * x + b * u]));
        }
        let inputs = vec![dv(&[u]); horizon];
        let lins: Vec<Linearization> = (0..horizon)
            .map(|k| scalar_lin(a, b, states[k][0], u, states[k + 1][0]))
            .collect();
        let barriers = vec![AffineBarrier { a: dv(&[1.0]), b: -0.2 }; horizon + 1];
        let ctx = RowContext {
            barriers: &barriers,
            linearizations: &lins,
            gammas: &gammas,
            x0: &states[0],
        };
        // h_j evaluated along the trajectory by direct recursion.
        let h_levels = |j: usize| -> Vec<f64> {
            let mut level: Vec<f64> = states.iter().map(|x| x[0] - 0.2).collect();
            for &g in gammas.iter().take(j) {
                level = (0..level.len() - 1)
                    .map(|v| level[v + 1] - (1.0 - g) * level[v])
                    .collect();
            }
            level
        };
        for l in 1..=3 {
            let h = h_levels(l - 1);
            for k in 0..horizon - l {
                let row = build_safety_row(&ctx, l, k).unwrap();
                let margin = h[k] - (1.0 - gammas[l - 1]).powi(k as i32) * h[0];
                let got = row.residual(&states, &inputs, 1.0);
                assert!((got - margin).abs() < 1e-12, "l={l} k={k}: {got} vs {margin}");
            }
        }
    }

    #[test]
    fn safety_row_errors() {
        let barriers = vec![AffineBarrier { a: dv(&[1.0]), b: 0.0 }];
        let lins = vec![scalar_lin(1.0, 1.0, 0.0, 0.0, 0.0)];
        let x0 = dv(&[1.0]);
        let ctx = RowContext {
            barriers: &barriers,
            linearizations: &lins,
            gammas: &[0.5, 0.5],
            x0: &x0,
        };
        assert!(matches!(
            build_safety_row(&ctx, 3, 0),
            Err(BarrierError::InvalidOrder { .. })
        ));
        assert!(matches!(
            build_safety_row(&ctx, 1, 2),
            Err(BarrierError::MissingStep(_))
        ));
        assert!(matches!(
            build_safety_row(&ctx, 2, 0),
            Err(BarrierError::MissingStep(_))
        ));
    }

    #[test]
    fn input_range_examples() {
        let lo = dv(&[-1.0, -1.0]);
        let hi = dv(&[1.0, 1.0]);
        assert_eq!(input_range(&dv(&[0.0, 0.0]), &lo, &hi), (0.0, 0.0));
        assert_eq!(input_range(&dv(&[1.0, -1.0]), &lo, &hi), (-2.0, 2.0));
    }

    #[test]
    fn box_sup_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=4 {
            for _ in 0..100 {
                let coef = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
                let lo = DVector::from_fn(n, |_, _| rng.random_range(-5.0..0.0));
                let hi = DVector::from_fn(n, |i, _| lo[i] + rng.random_range(0.0..5.0));
                let c0 = rng.random_range(-1.0..1.0);
                let brute = (0u32..(1 << n))
                    .map(|mask| {
                        let v = DVector::from_fn(n, |i, _| if mask & (1 << i) != 0 { hi[i] } else { lo[i] });
                        coef.dot(&v) + c0
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((affine_box_sup(&coef, c0, &lo, &hi) - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(BarrierParams::new(vec![0.3, 0.3], 2, 0.1).is_ok());
        assert!(BarrierParams::new(vec![0.0, 0.3], 2, 0.1).is_err());
        assert!(BarrierParams::new(vec![0.3, 1.2], 2, 0.1).is_err());
        assert!(BarrierParams::new(vec![0.3], 2, 0.1).is_err());
        assert!(BarrierParams::new(vec![], 0, 0.1).is_err());
        assert!(BarrierParams::new(vec![0.3], 1, 0.0).is_err());
        assert!(CircularObstacle::new([0.0, 0.0], 0.0).is_err());
    }
}
