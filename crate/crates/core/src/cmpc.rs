//! Sequential convex MPC for safe output consensus.
//!
//! Each SQP iteration linearizes every agent's dynamics along the current
//! nominal trajectory, replaces the circular keep-out regions by tangent
//! half-planes at the nominal positions, and solves one centralized QP over
//! `z = [U; X; Omega]`. The solution becomes the next nominal until the
//! predicted outputs stop moving.

use crate::barrier::{
    affine_box_sup, build_safety_row, input_range, tangent_cut, AffineBarrier, BarrierError, BarrierParams,
    CircularObstacle, Linearization, RowContext, SafetyRow, Variable,
};
use crate::dynamics::{DynamicsError, PlantModel};
use crate::graph::{GraphError, Topology};
use crate::qp::{QpError, QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, WarmStart};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CmpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// How agents without in-neighbors are driven.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeaderMode {
    /// Run the same MPC with the consensus term replaced by goal tracking.
    #[default]
    Track,
    /// Hold the leader: its inputs are fixed to zero.
    Pinned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmpcConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_w: f64,
    pub p: DMatrix<f64>,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub s_max: usize,
    /// Infinity-norm radius on `x - x_nom` and `u - u_nom`; `None` disables it.
    pub trust_region: Option<f64>,
    /// Output tracked by leaders; `None` leaves them without a drive term.
    pub goal_output: Option<DVector<f64>>,
    pub leader_mode: LeaderMode,
}

impl CmpcConfig {
    pub fn validate(&self, output_dim: usize, input_dim: usize) -> Result<(), CmpcError> {
        let err = |msg: String| Err(CmpcError::Config(msg));
        if self.horizon < 1 {
            return err("horizon must be at least 1".into());
        }
        if self.s_max < 1 {
            return err("s_max must be at least 1".into());
        }
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0) {
            return err(format!(
                "convergence thresholds must be positive ({}, {})",
                self.eps_abs, self.eps_rel
            ));
        }
        if !(self.r_w > 0.0 && self.r_w.is_finite()) {
            return err(format!("R_w must be positive, got {}", self.r_w));
        }
        for (name, m, dim) in [
            ("Q", &self.q, output_dim),
            ("R", &self.r, input_dim),
            ("P", &self.p, output_dim),
        ] {
            if m.shape() != (dim, dim) {
                return err(format!("{name} is {:?}, expected {dim}x{dim}", m.shape()));
            }
            if !is_positive_definite(m) {
                return err(format!("{name} is not symmetric positive definite"));
            }
        }
        if let Some(rho) = self.trust_region {
            if !(rho > 0.0) {
                return err(format!("trust region radius must be positive, got {rho}"));
            }
        }
        if let Some(g) = &self.goal_output {
            if g.len() != output_dim {
                return err(format!("goal output has {} entries, expected {output_dim}", g.len()));
            }
        }
        Ok(())
    }
}

fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let asym = (m - m.transpose()).amax();
    asym <= 1e-12 * (1.0 + m.amax()) && m.clone().cholesky().is_some()
}

/// State and input boxes shared by all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub x_min: DVector<f64>,
    pub x_max: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl Bounds {
    pub fn validate(&self, state_dim: usize, input_dim: usize) -> Result<(), CmpcError> {
        let pairs = [
            ("state", &self.x_min, &self.x_max, state_dim),
            ("input", &self.u_min, &self.u_max, input_dim),
        ];
        for (what, lo, hi, dim) in pairs {
            if lo.len() != dim || hi.len() != dim {
                return Err(CmpcError::Config(format!("{what} bounds must have {dim} entries")));
            }
            if (0..dim).any(|i| lo[i].is_nan() || hi[i].is_nan() || lo[i] > hi[i]) {
                return Err(CmpcError::Config(format!("{what} box is empty")));
            }
        }
        Ok(())
    }
}

/// Per-agent predicted states `x(0..=T)` and inputs `u(0..T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub states: Vec<Vec<DVector<f64>>>,
    pub inputs: Vec<Vec<DVector<f64>>>,
}

impl NominalTrajectory {
    /// Roll each agent forward from `x0` through the nonlinear plant.
    pub fn rollout(
        model: &dyn PlantModel,
        x0: &[DVector<f64>],
        inputs: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self, CmpcError> {
        if x0.len() != inputs.len() {
            return Err(CmpcError::Config(format!(
                "{} initial states for {} input sequences",
                x0.len(),
                inputs.len()
            )));
        }
        let mut states = Vec::with_capacity(x0.len());
        for (x, us) in x0.iter().zip(&inputs) {
            let mut traj = vec![x.clone()];
            for u in us {
                let next = model.step(traj.last().unwrap(), u)?;
                traj.push(next);
            }
            states.push(traj);
        }
        Ok(Self { states, inputs })
    }

    pub fn zero_input(model: &dyn PlantModel, x0: &[DVector<f64>], horizon: usize) -> Result<Self, CmpcError> {
        let inputs = vec![vec![DVector::zeros(model.input_dim()); horizon]; x0.len()];
        Self::rollout(model, x0, inputs)
    }

    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    pub fn horizon(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Outputs `y(k)` for `k = 0..T`, stacked over steps then agents.
    pub fn stacked_outputs(&self, c: &DMatrix<f64>) -> DVector<f64> {
        let n = self.n_agents();
        let t = self.horizon();
        let p = c.nrows();
        let mut y = DVector::zeros(n * t * p);
        for k in 0..t {
            for i in 0..n {
                y.rows_mut((k * n + i) * p, p).copy_from(&(c * &self.states[i][k]));
            }
        }
        y
    }

    pub fn first_inputs(&self) -> Vec<DVector<f64>> {
        self.inputs.iter().map(|u| u[0].clone()).collect()
    }
}

/// Local models `(A, B, f(x_nom, u_nom))` at every agent and step.
pub fn linearize_along(
    model: &dyn PlantModel,
    nominal: &NominalTrajectory,
) -> Result<Vec<Vec<Linearization>>, CmpcError> {
    let mut out = Vec::with_capacity(nominal.n_agents());
    for (xs, us) in nominal.states.iter().zip(&nominal.inputs) {
        let mut per_agent = Vec::with_capacity(us.len());
        for (k, u) in us.iter().enumerate() {
            let (a, b) = model.jacobians(&xs[k], u)?;
            per_agent.push(Linearization {
                a,
                b,
                x_nom: xs[k].clone(),
                u_nom: u.clone(),
                x_next: model.step(&xs[k], u)?,
            });
        }
        out.push(per_agent);
    }
    Ok(out)
}

/// Candidate for the next time step: inputs shifted by one with the last
/// one held, states re-rolled from the new measurement.
pub fn shift_warm_start(
    model: &dyn PlantModel,
    previous: &NominalTrajectory,
    measured: &[DVector<f64>],
) -> Result<NominalTrajectory, CmpcError> {
    let inputs = previous
        .inputs
        .iter()
        .map(|us| {
            let mut shifted: Vec<_> = us.iter().skip(1).cloned().collect();
            if let Some(last) = us.last() {
                shifted.push(last.clone());
            }
            shifted
        })
        .collect();
    NominalTrajectory::rollout(model, measured, inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceKind {
    /// Keep-out disc of radius `d` around in-neighbor `j`.
    Neighbor(usize),
    /// Index into the obstacle list.
    Obstacle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintInstance {
    pub agent: usize,
    pub kind: InstanceKind,
}

/// Index map of `z = [U; X; Omega]`.
///
/// Inputs and states are ordered step-major then agent; slacks by step,
/// then constraint instance, then barrier order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    pub n_agents: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    pub order: usize,
    pub instances: Vec<ConstraintInstance>,
}

impl DecisionLayout {
    /// Instances are each agent's in-neighbors followed by every obstacle.
    pub fn new(
        topology: &Topology,
        n_obstacles: usize,
        state_dim: usize,
        input_dim: usize,
        horizon: usize,
        order: usize,
    ) -> Result<Self, CmpcError> {
        let mut instances = Vec::new();
        for agent in 0..topology.n_agents() {
            for j in topology.in_neighbors(agent)? {
                instances.push(ConstraintInstance {
                    agent,
                    kind: InstanceKind::Neighbor(j),
                });
            }
            for o in 0..n_obstacles {
                instances.push(ConstraintInstance {
                    agent,
                    kind: InstanceKind::Obstacle(o),
                });
            }
        }
        Ok(Self {
            n_agents: topology.n_agents(),
            state_dim,
            input_dim,
            horizon,
            order,
            instances,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.n_agents * self.horizon * self.input_dim
    }

    pub fn n_states(&self) -> usize {
        self.n_agents * self.horizon * self.state_dim
    }

    /// Total slack count `M`.
    pub fn n_slacks(&self) -> usize {
        self.horizon * self.instances.len() * self.order
    }

    pub fn dim(&self) -> usize {
        self.n_inputs() + self.n_states() + self.n_slacks()
    }

    /// First index of `u_agent(k)`, `k < T`.
    pub fn input(&self, agent: usize, k: usize) -> usize {
        debug_assert!(agent < self.n_agents && k < self.horizon);
        (k * self.n_agents + agent) * self.input_dim
    }

    /// First index of `x_agent(k)`, `1 <= k <= T`.
    pub fn state(&self, agent: usize, k: usize) -> usize {
        debug_assert!(agent < self.n_agents && (1..=self.horizon).contains(&k));
        self.n_inputs() + ((k - 1) * self.n_agents + agent) * self.state_dim
    }

    /// Index of the slack of `instance` at order `l >= 1` and step `k`.
    pub fn slack(&self, instance: usize, l: usize, k: usize) -> usize {
        debug_assert!(instance < self.instances.len() && (1..=self.order).contains(&l) && k < self.horizon);
        self.n_inputs() + self.n_states() + (k * self.instances.len() + instance) * self.order + (l - 1)
    }

    pub fn encode(&self, nominal: &NominalTrajectory, slacks: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        for i in 0..self.n_agents {
            for k in 0..self.horizon {
                z.rows_mut(self.input(i, k), self.input_dim)
                    .copy_from(&nominal.inputs[i][k]);
                z.rows_mut(self.state(i, k + 1), self.state_dim)
                    .copy_from(&nominal.states[i][k + 1]);
            }
        }
        let base = self.n_inputs() + self.n_states();
        z.rows_mut(base, slacks.len()).copy_from_slice(slacks);
        z
    }

    /// Split `z` into a trajectory anchored at `x0` and the slack vector.
    pub fn decode(&self, z: &DVector<f64>, x0: &[DVector<f64>]) -> (NominalTrajectory, Vec<f64>) {
        let mut states = Vec::with_capacity(self.n_agents);
        let mut inputs = Vec::with_capacity(self.n_agents);
        for (i, xi0) in x0.iter().enumerate() {
            let mut xs = vec![xi0.clone()];
            let mut us = Vec::with_capacity(self.horizon);
            for k in 0..self.horizon {
                us.push(z.rows(self.input(i, k), self.input_dim).into_owned());
                xs.push(z.rows(self.state(i, k + 1), self.state_dim).into_owned());
            }
            states.push(xs);
            inputs.push(us);
        }
        let base = self.n_inputs() + self.n_states();
        let slacks = z.rows(base, self.n_slacks()).iter().copied().collect();
        (NominalTrajectory { states, inputs }, slacks)
    }
}

/// Which safety row an inequality of the assembled QP came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTag {
    pub instance: usize,
    pub order: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledQp {
    pub problem: QpProblem,
    /// Safety rows in the order of the inequality block.
    pub safety_rows: Vec<(RowTag, SafetyRow)>,
    /// Cost terms independent of `z`, so that `objective + constant` is the
    /// CMPC cost.
    pub constant: f64,
    /// Tangent cuts built from a nominal inside its disc.
    pub nominal_inside: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpIteration {
    pub e_abs: f64,
    pub e_rel: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub nominal_inside: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpTrace {
    pub t: usize,
    pub iterations: Vec<SqpIteration>,
    pub converged: bool,
    /// A QP was primal infeasible; the trajectory is the last good iterate.
    pub infeasible: bool,
    pub nominal: NominalTrajectory,
    pub slacks: Vec<f64>,
    /// CMPC cost of the returned trajectory.
    pub cost: f64,
}

impl SqpTrace {
    pub fn iterations_used(&self) -> usize {
        self.iterations.len()
    }
}

/// Recursive-feasibility diagnostics for one order-`r` safety row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityMargin {
    pub instance: ConstraintInstance,
    pub k: usize,
    /// Input coefficient row of the order-`r` condition.
    pub eta: DVector<f64>,
    pub u_min: f64,
    pub u_max: f64,
    /// Largest input contribution the state part can demand over the box.
    pub f_max: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityMargins {
    pub entries: Vec<FeasibilityMargin>,
}

impl FeasibilityMargins {
    pub fn satisfied_count(&self) -> usize {
        self.entries.iter().filter(|e| e.satisfied).count()
    }

    pub fn all_satisfied(&self) -> bool {
        self.entries.iter().all(|e| e.satisfied)
    }
}

/// Centralized CMPC controller for one multi-agent system.
pub struct Cmpc {
    model: Box<dyn PlantModel>,
    topology: Topology,
    obstacles: Vec<CircularObstacle>,
    barrier: BarrierParams,
    bounds: Bounds,
    config: CmpcConfig,
    layout: DecisionLayout,
    leaders: Vec<usize>,
    solver: QpSolver,
}

impl std::fmt::Debug for Cmpc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cmpc")
            .field("layout", &self.layout)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Cmpc {
    pub fn new(
        model: Box<dyn PlantModel>,
        topology: Topology,
        obstacles: Vec<CircularObstacle>,
        barrier: BarrierParams,
        bounds: Bounds,
        config: CmpcConfig,
        solver: QpSettings,
    ) -> Result<Self, CmpcError> {
        barrier.validate()?;
        bounds.validate(model.state_dim(), model.input_dim())?;
        config.validate(model.output_dim(), model.input_dim())?;
        if model.output_matrix().shape() != (model.output_dim(), model.state_dim()) {
            return Err(CmpcError::Config("output matrix shape disagrees with the model".into()));
        }
        let layout = DecisionLayout::new(
            &topology,
            obstacles.len(),
            model.state_dim(),
            model.input_dim(),
            config.horizon,
            barrier.relative_degree,
        )?;
        let leaders = topology.roots();
        Ok(Self {
            model,
            topology,
            obstacles,
            barrier,
            bounds,
            config,
            layout,
            leaders,
            solver: QpSolver::new(solver),
        })
    }

    pub fn model(&self) -> &dyn PlantModel {
        self.model.as_ref()
    }

    pub fn layout(&self) -> &DecisionLayout {
        &self.layout
    }

    pub fn config(&self) -> &CmpcConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn leaders(&self) -> &[usize] {
        &self.leaders
    }

    fn check_states(&self, x0: &[DVector<f64>], nominal: &NominalTrajectory) -> Result<(), CmpcError> {
        let n = self.layout.n_agents;
        if x0.len() != n || nominal.n_agents() != n {
            return Err(CmpcError::Config(format!(
                "expected {n} agents, got {} measured states and {} nominal trajectories",
                x0.len(),
                nominal.n_agents()
            )));
        }
        for i in 0..n {
            self.model.check_state(&x0[i])?;
            if nominal.states[i].len() != self.config.horizon + 1 || nominal.inputs[i].len() != self.config.horizon {
                return Err(CmpcError::Config(format!(
                    "nominal of agent {i} does not span the horizon {}",
                    self.config.horizon
                )));
            }
        }
        Ok(())
    }

    /// Tangent barriers of one instance along the nominal, steps `0..T`.
    fn instance_barriers(
        &self,
        inst: &ConstraintInstance,
        nominal: &NominalTrajectory,
    ) -> Result<(Vec<AffineBarrier>, usize), CmpcError> {
        let pos = self.model.position_indices();
        let n = self.model.state_dim();
        let xs = &nominal.states[inst.agent];
        let mut barriers = Vec::with_capacity(self.config.horizon);
        let mut inside = 0;
        for (v, x) in xs.iter().enumerate().take(self.config.horizon) {
            let p = [x[pos[0]], x[pos[1]]];
            let (center, radius) = match inst.kind {
                InstanceKind::Neighbor(j) => {
                    let xj = &nominal.states[j][v];
                    ([xj[pos[0]], xj[pos[1]]], self.barrier.safe_distance)
                }
                InstanceKind::Obstacle(o) => (self.obstacles[o].center, self.obstacles[o].radius),
            };
            let cut = tangent_cut(p, center, radius, n, pos)?;
            inside += usize::from(cut.nominal_inside);
            barriers.push(cut.barrier);
        }
        Ok((barriers, inside))
    }

    /// Stage weight on consensus / tracking errors at step `k`.
    fn output_weight(&self, k: usize) -> &DMatrix<f64> {
        if k == self.config.horizon {
            &self.config.p
        } else {
            &self.config.q
        }
    }

    /// CMPC cost of a trajectory and slack vector.
    pub fn cost(&self, nominal: &NominalTrajectory, slacks: &[f64]) -> f64 {
        let c = self.model.output_matrix();
        let mut j = 0.0;
        for k in 0..=self.config.horizon {
            let w = self.output_weight(k);
            for (sender, receiver) in self.topology.edges() {
                let a = self.topology.weight(receiver, sender);
                let e = &c * (&nominal.states[receiver][k] - &nominal.states[sender][k]);
                j += a * e.dot(&(w * &e));
            }
            if let Some(goal) = &self.config.goal_output {
                for &l in &self.leaders {
                    let e = &c * &nominal.states[l][k] - goal;
                    j += e.dot(&(w * &e));
                }
            }
            if k < self.config.horizon {
                for us in &nominal.inputs {
                    j += us[k].dot(&(&self.config.r * &us[k]));
                }
            }
        }
        j + slacks
            .iter()
            .map(|w| self.config.r_w * (w - 1.0) * (w - 1.0))
            .sum::<f64>()
    }

    /// Build the QP around `nominal`, which must be anchored at `x0`.
    pub fn assemble_qp(&self, x0: &[DVector<f64>], nominal: &NominalTrajectory) -> Result<AssembledQp, CmpcError> {
        self.check_states(x0, nominal)?;
        let lay = &self.layout;
        let (n, big_n, t) = (lay.state_dim, lay.n_agents, lay.horizon);
        let dim = lay.dim();
        let c = self.model.output_matrix();
        let mut h = DMatrix::zeros(dim, dim);
        let mut f = DVector::zeros(dim);
        let mut constant = 0.0;

        // Output terms at k = 0 involve only the measurement.
        for k in 0..=t {
            let wq = self.output_weight(k);
            let w = c.transpose() * wq * &c;
            for (sender, receiver) in self.topology.edges() {
                let a = self.topology.weight(receiver, sender);
                if k == 0 {
                    let e = &c * (&x0[receiver] - &x0[sender]);
                    constant += a * e.dot(&(wq * &e));
                    continue;
                }
                let (ri, si) = (lay.state(receiver, k), lay.state(sender, k));
                let blk = &w * (2.0 * a);
                add_block(&mut h, ri, ri, &blk, 1.0);
                add_block(&mut h, si, si, &blk, 1.0);
                add_block(&mut h, ri, si, &blk, -1.0);
                add_block(&mut h, si, ri, &blk, -1.0);
            }
            if let Some(goal) = &self.config.goal_output {
                for &l in &self.leaders {
                    if k == 0 {
                        let e = &c * &x0[l] - goal;
                        constant += e.dot(&(wq * &e));
                        continue;
                    }
                    let li = lay.state(l, k);
                    add_block(&mut h, li, li, &w, 2.0);
                    let lin = c.transpose() * (wq * goal) * -2.0;
                    let mut seg = f.rows_mut(li, n);
                    seg += lin;
                    constant += goal.dot(&(wq * goal));
                }
            }
        }
        for i in 0..big_n {
            for k in 0..t {
                add_block(&mut h, lay.input(i, k), lay.input(i, k), &self.config.r, 2.0);
            }
        }
        let slack_base = lay.n_inputs() + lay.n_states();
        for s in 0..lay.n_slacks() {
            h[(slack_base + s, slack_base + s)] = 2.0 * self.config.r_w;
            f[slack_base + s] = -2.0 * self.config.r_w;
        }
        constant += self.config.r_w * lay.n_slacks() as f64;

        // Dynamics: x(k+1) - A x(k) - B u(k) = f(x_nom, u_nom) - A x_nom - B u_nom.
        let lins = linearize_along(self.model.as_ref(), nominal)?;
        let mut a_eq = DMatrix::zeros(big_n * t * n, dim);
        let mut b_eq = DVector::zeros(big_n * t * n);
        for i in 0..big_n {
            for k in 0..t {
                let row = (k * big_n + i) * n;
                let lin = &lins[i][k];
                let mut rhs = lin.offset();
                for r in 0..n {
                    a_eq[(row + r, lay.state(i, k + 1) + r)] = 1.0;
                }
                if k == 0 {
                    rhs += &lin.a * &x0[i];
                } else {
                    add_block(&mut a_eq, row, lay.state(i, k), &lin.a, -1.0);
                }
                add_block(&mut a_eq, row, lay.input(i, k), &lin.b, -1.0);
                b_eq.rows_mut(row, n).copy_from(&rhs);
            }
        }

        // Safety rows: coef^T vars + constant - slack_coef * w >= 0.
        let mut safety_rows = Vec::new();
        let mut nominal_inside = 0;
        for (s, inst) in lay.instances.iter().enumerate() {
            let (barriers, inside) = self.instance_barriers(inst, nominal)?;
            nominal_inside += inside;
            let ctx = RowContext {
                barriers: &barriers,
                linearizations: &lins[inst.agent],
                gammas: &self.barrier.gammas,
                x0: &x0[inst.agent],
            };
            for k in 0..t {
                for l in 1..=lay.order {
                    let row = build_safety_row(&ctx, l, k)?;
                    safety_rows.push((
                        RowTag {
                            instance: s,
                            order: l,
                            k,
                        },
                        row,
                    ));
                }
            }
        }
        let mut a_in = DMatrix::zeros(safety_rows.len(), dim);
        let mut b_in = DVector::zeros(safety_rows.len());
        for (r, (tag, row)) in safety_rows.iter().enumerate() {
            let agent = lay.instances[tag.instance].agent;
            for (var, coef) in &row.terms {
                let col = match *var {
                    Variable::State(v) => lay.state(agent, v),
                    Variable::Input(v) => lay.input(agent, v),
                };
                for (q, cv) in coef.iter().enumerate() {
                    a_in[(r, col + q)] -= cv;
                }
            }
            a_in[(r, lay.slack(tag.instance, tag.order, tag.k))] = row.slack_coef;
            b_in[r] = row.constant;
        }

        let (lb, ub) = self.variable_bounds(nominal);
        let problem = QpProblem::new(h, f)
            .with_equalities(a_eq, b_eq)
            .with_inequalities(a_in, b_in)
            .with_bounds(lb, ub);
        Ok(AssembledQp {
            problem,
            safety_rows,
            constant,
            nominal_inside,
        })
    }

    fn variable_bounds(&self, nominal: &NominalTrajectory) -> (DVector<f64>, DVector<f64>) {
        let lay = &self.layout;
        let dim = lay.dim();
        let mut lb = DVector::from_element(dim, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(dim, f64::INFINITY);
        let rho = self.config.trust_region;
        let mut set = |idx: usize, lo: f64, hi: f64, nom: f64| {
            let (mut l, mut u) = (lo, hi);
            if let Some(rho) = rho {
                l = l.max(nom - rho);
                u = u.min(nom + rho);
                if l > u {
                    // Nominal too far outside the box: pin to the nearest edge.
                    let v = nom.clamp(lo, hi);
                    l = v;
                    u = v;
                }
            }
            lb[idx] = l;
            ub[idx] = u;
        };
        for i in 0..lay.n_agents {
            let pinned = self.config.leader_mode == LeaderMode::Pinned && self.leaders.contains(&i);
            for k in 0..lay.horizon {
                for q in 0..lay.input_dim {
                    let (lo, hi) = if pinned {
                        (0.0, 0.0)
                    } else {
                        (self.bounds.u_min[q], self.bounds.u_max[q])
                    };
                    set(lay.input(i, k) + q, lo, hi, nominal.inputs[i][k][q]);
                }
                for q in 0..lay.state_dim {
                    set(
                        lay.state(i, k + 1) + q,
                        self.bounds.x_min[q],
                        self.bounds.x_max[q],
                        nominal.states[i][k + 1][q],
                    );
                }
            }
        }
        (lb, ub)
    }

    /// Iterate linearize -> assemble -> solve from `warm` until the
    /// predicted outputs converge or `s_max` is reached.
    pub fn sqp_solve(&mut self, t: usize, x0: &[DVector<f64>], warm: NominalTrajectory) -> Result<SqpTrace, CmpcError> {
        self.check_states(x0, &warm)?;
        let mut nominal = warm;
        for (i, x) in x0.iter().enumerate() {
            nominal.states[i][0] = x.clone();
        }
        let c = self.model.output_matrix();
        let mut slacks = vec![1.0; self.layout.n_slacks()];
        let mut qp_warm = WarmStart {
            z: self.layout.encode(&nominal, &slacks),
            duals: None,
        };
        let mut iterations = Vec::new();
        let mut converged = false;
        let mut infeasible = false;
        for _ in 0..self.config.s_max {
            let asm = self.assemble_qp(x0, &nominal)?;
            let sol: QpSolution = self.solver.solve(&asm.problem, Some(&qp_warm))?;
            if sol.status == QpStatus::PrimalInfeasible {
                iterations.push(SqpIteration {
                    e_abs: f64::NAN,
                    e_rel: f64::NAN,
                    qp_status: sol.status,
                    qp_iterations: sol.iterations,
                    nominal_inside: asm.nominal_inside,
                });
                infeasible = true;
                break;
            }
            let (next, next_slacks) = self.layout.decode(&sol.z, x0);
            let y_prev = nominal.stacked_outputs(&c);
            let diff = (next.stacked_outputs(&c) - &y_prev).norm();
            // A vanishing reference makes the relative test meaningless; the
            // floor leaves the decision to the absolute test.
            let e_rel = diff / y_prev.norm().max(1e-12);
            iterations.push(SqpIteration {
                e_abs: diff,
                e_rel,
                qp_status: sol.status,
                qp_iterations: sol.iterations,
                nominal_inside: asm.nominal_inside,
            });
            nominal = next;
            slacks = next_slacks;
            qp_warm = WarmStart::from(&sol);
            if diff <= self.config.eps_abs || e_rel <= self.config.eps_rel {
                converged = true;
                break;
            }
        }
        let cost = self.cost(&nominal, &slacks);
        Ok(SqpTrace {
            t,
            iterations,
            converged,
            infeasible,
            nominal,
            slacks,
            cost,
        })
    }

    /// Order-`r` input authority versus worst-case state demand along
    /// `nominal`, for every constraint instance and step.
    pub fn feasibility_margins(
        &self,
        x0: &[DVector<f64>],
        nominal: &NominalTrajectory,
    ) -> Result<FeasibilityMargins, CmpcError> {
        self.check_states(x0, nominal)?;
        let lins = linearize_along(self.model.as_ref(), nominal)?;
        let r = self.barrier.relative_degree;
        let mut entries = Vec::new();
        for inst in &self.layout.instances {
            let (barriers, _) = self.instance_barriers(inst, nominal)?;
            let ctx = RowContext {
                barriers: &barriers,
                linearizations: &lins[inst.agent],
                gammas: &self.barrier.gammas,
                x0: &x0[inst.agent],
            };
            for k in 0..self.config.horizon {
                let row = build_safety_row(&ctx, r, k)?;
                let mut eta = DVector::zeros(self.model.input_dim());
                // Required input contribution: eta^T u >= F(x) with w = 1.
                let mut f_max = row.slack_coef - row.constant;
                for (var, coef) in &row.terms {
                    match var {
                        Variable::Input(_) => eta += coef,
                        Variable::State(_) => {
                            f_max += affine_box_sup(&(-coef), 0.0, &self.bounds.x_min, &self.bounds.x_max);
                        }
                    }
                }
                let (u_min, u_max) = input_range(&eta, &self.bounds.u_min, &self.bounds.u_max);
                entries.push(FeasibilityMargin {
                    instance: *inst,
                    k,
                    eta,
                    u_min,
                    u_max,
                    f_max,
                    satisfied: u_min >= f_max,
                });
            }
        }
        Ok(FeasibilityMargins { entries })
    }
}

fn add_block(target: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>, scale: f64) {
    let mut view = target.view_mut((row, col), block.shape());
    view += block * scale;
}
