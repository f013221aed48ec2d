//! Closed-loop simulation: scenario files, the receding-horizon loop, run
//! logs, metrics and export.

mod export;
mod log;
mod plot;

pub use export::{export_csv, export_json, import_json, ExportError};
pub use log::{metrics, Metrics, RunLog, StepRecord};
pub use plot::write_plots;

use crate::barrier::{squared_margin, BarrierParams, CircularObstacle};
use crate::cmpc::{shift_warm_start, Bounds, Cmpc, CmpcConfig, CmpcError, LeaderMode, NominalTrajectory};
use crate::dynamics::{PlantModel, UnicycleModel};
use crate::graph::Topology;
use crate::qp::QpSettings;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Controller(#[from] CmpcError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// Only `"unicycle"` is built in.
    pub model: String,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSection {
    /// Goal state (or goal output) of the leader.
    pub goal: Vec<f64>,
    #[serde(default)]
    pub mode: LeaderMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    /// Inter-agent safe distance.
    pub d: f64,
    /// Relative degree.
    pub r: usize,
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmpcSection {
    pub horizon: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub r_w: f64,
    pub p: Vec<Vec<f64>>,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub s_max: usize,
    #[serde(default)]
    pub trust_region: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub steps: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub plant: PlantSection,
    pub topology: Topology,
    /// Initial state of every agent.
    pub agents: Vec<Vec<f64>>,
    pub leader: LeaderSection,
    #[serde(default)]
    pub obstacles: Vec<CircularObstacle>,
    pub bounds: BoundsSection,
    pub barrier: BarrierSection,
    pub cmpc: CmpcSection,
    #[serde(default)]
    pub solver: QpSettings,
    pub sim: SimSection,
    /// Only used to draw test samples; the loop itself is deterministic.
    #[serde(default)]
    pub seed: u64,
}

const PAPER_SEC5: &str = include_str!("../../scenarios/paper_sec5.json");

impl Scenario {
    /// The four-unicycle obstacle-avoidance scenario bundled with the crate.
    pub fn paper_sec5() -> Self {
        Self::from_json(PAPER_SEC5).expect("bundled scenario is valid")
    }

    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn model(&self) -> Result<Box<dyn PlantModel>, ScenarioError> {
        match self.plant.model.as_str() {
            "unicycle" => {
                if !(self.plant.dt > 0.0 && self.plant.dt.is_finite()) {
                    return Err(invalid(format!("dt must be positive, got {}", self.plant.dt)));
                }
                Ok(Box::new(UnicycleModel::new(self.plant.dt)))
            }
            other => Err(invalid(format!("unknown plant model '{other}'"))),
        }
    }

    /// Leader goal as a full state, when given as one.
    fn goal_state(&self, model: &dyn PlantModel) -> Option<DVector<f64>> {
        (self.leader.goal.len() == model.state_dim()).then(|| DVector::from_column_slice(&self.leader.goal))
    }

    fn goal_output(&self, model: &dyn PlantModel) -> Result<DVector<f64>, ScenarioError> {
        let goal = DVector::from_column_slice(&self.leader.goal);
        if goal.len() == model.state_dim() {
            Ok(model.output_matrix() * goal)
        } else if goal.len() == model.output_dim() {
            Ok(goal)
        } else {
            Err(invalid(format!(
                "leader goal has {} entries; expected a state ({}) or an output ({})",
                goal.len(),
                model.state_dim(),
                model.output_dim()
            )))
        }
    }

    pub fn bounds(&self) -> Bounds {
        let v = |x: &[f64]| DVector::from_column_slice(x);
        Bounds {
            x_min: v(&self.bounds.x_min),
            x_max: v(&self.bounds.x_max),
            u_min: v(&self.bounds.u_min),
            u_max: v(&self.bounds.u_max),
        }
    }

    pub fn barrier_params(&self) -> BarrierParams {
        BarrierParams {
            gammas: self.barrier.gammas.clone(),
            relative_degree: self.barrier.r,
            safe_distance: self.barrier.d,
        }
    }

    pub fn cmpc_config(&self) -> Result<CmpcConfig, ScenarioError> {
        let model = self.model()?;
        let c = &self.cmpc;
        Ok(CmpcConfig {
            horizon: c.horizon,
            q: matrix("q", &c.q)?,
            r: matrix("r", &c.r)?,
            r_w: c.r_w,
            p: matrix("p", &c.p)?,
            eps_abs: c.eps_abs,
            eps_rel: c.eps_rel,
            s_max: c.s_max,
            trust_region: c.trust_region,
            goal_output: Some(self.goal_output(model.as_ref())?),
            leader_mode: self.leader.mode,
        })
    }

    /// Initial states; in pinned mode leaders start at the goal state.
    pub fn initial_states(&self) -> Result<Vec<DVector<f64>>, ScenarioError> {
        let model = self.model()?;
        let mut x0: Vec<DVector<f64>> = self.agents.iter().map(|x| DVector::from_column_slice(x)).collect();
        if self.leader.mode == LeaderMode::Pinned {
            let goal = self
                .goal_state(model.as_ref())
                .ok_or_else(|| invalid("pinned leader mode needs a full goal state".into()))?;
            for l in self.topology.roots() {
                x0[l] = goal.clone();
            }
        }
        Ok(x0)
    }

    pub fn controller(&self) -> Result<Cmpc, ScenarioError> {
        Ok(Cmpc::new(
            self.model()?,
            self.topology.clone(),
            self.obstacles.clone(),
            self.barrier_params(),
            self.bounds(),
            self.cmpc_config()?,
            self.solver.clone(),
        )?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let model = self.model()?;
        let (n, m) = (model.state_dim(), model.input_dim());
        let bounds = self.bounds();
        bounds.validate(n, m)?;
        self.barrier_params().validate().map_err(CmpcError::from)?;
        self.cmpc_config()?.validate(model.output_dim(), m)?;
        if self.agents.len() != self.topology.n_agents() {
            return Err(invalid(format!(
                "{} initial states for {} agents in the topology",
                self.agents.len(),
                self.topology.n_agents()
            )));
        }
        for o in &self.obstacles {
            CircularObstacle::new(o.center, o.radius).map_err(CmpcError::from)?;
        }
        if self.solver.max_iter == 0 || self.solver.check_interval == 0 {
            return Err(invalid("solver max_iter and check_interval must be positive".into()));
        }
        let x0 = self.initial_states()?;
        let pos = model.position_indices();
        for (i, x) in x0.iter().enumerate() {
            if x.len() != n {
                return Err(invalid(format!(
                    "agent {i} has {} state entries, expected {n}",
                    x.len()
                )));
            }
            if (0..n).any(|q| !(bounds.x_min[q] <= x[q] && x[q] <= bounds.x_max[q])) {
                return Err(invalid(format!("agent {i} starts outside the state box")));
            }
            let p = [x[pos[0]], x[pos[1]]];
            for (o, obs) in self.obstacles.iter().enumerate() {
                if obs.squared_margin(p) <= 0.0 {
                    return Err(invalid(format!("agent {i} starts inside obstacle {o}")));
                }
            }
        }
        for (j, i) in self.topology.edges() {
            let (pi, pj) = ([x0[i][pos[0]], x0[i][pos[1]]], [x0[j][pos[0]], x0[j][pos[1]]]);
            if squared_margin(pi, pj, self.barrier.d) <= 0.0 {
                return Err(invalid(format!("agents {i} and {j} start within the safe distance")));
            }
        }
        Ok(())
    }
}

fn invalid(msg: String) -> ScenarioError {
    ScenarioError::Invalid(msg)
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ScenarioError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(format!("matrix {name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// `||p_i - p_j||^2 - d^2` for every edge `(j, i)`, then
/// `||p_i - c||^2 - r^2` for every agent and obstacle.
pub fn barrier_values(
    scenario: &Scenario,
    model: &dyn PlantModel,
    states: &[DVector<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let pos = model.position_indices();
    let p = |x: &DVector<f64>| [x[pos[0]], x[pos[1]]];
    let h1 = scenario
        .topology
        .edges()
        .iter()
        .map(|&(j, i)| squared_margin(p(&states[i]), p(&states[j]), scenario.barrier.d))
        .collect();
    let h2 = states
        .iter()
        .map(|x| scenario.obstacles.iter().map(|o| o.squared_margin(p(x))).collect())
        .collect();
    (h1, h2)
}

/// Receding-horizon loop: solve, apply the first input through the true
/// plant, shift, repeat. Runtime failures stop the loop and are recorded in
/// [`RunLog::abort`].
pub fn run_closed_loop(scenario: &Scenario) -> Result<RunLog, ScenarioError> {
    scenario.validate()?;
    let mut controller = scenario.controller()?;
    let model = scenario.model()?;
    let c = model.output_matrix();
    let mut x = scenario.initial_states()?;
    let mut log = RunLog::new(scenario);

    let mut warm = NominalTrajectory::zero_input(model.as_ref(), &x, scenario.cmpc.horizon)?;
    for t in 0..scenario.sim.steps {
        let start = Instant::now();
        let result = controller.sqp_solve(t, &x, warm.clone());
        let wall = start.elapsed().as_secs_f64();
        let trace = match result {
            Ok(trace) => trace,
            Err(e) => {
                log.abort = Some(format!("t = {t}: {e}"));
                break;
            }
        };
        let u = trace.nominal.first_inputs();
        let (h1, h2) = barrier_values(scenario, model.as_ref(), &x);
        let next: Result<Vec<_>, _> = x.iter().zip(&u).map(|(xi, ui)| model.step(xi, ui)).collect();
        let next = match next {
            Ok(next) => next,
            Err(e) => {
                log.abort = Some(format!("t = {t}: {e}"));
                break;
            }
        };
        log.steps.push(StepRecord {
            t,
            states: x.iter().map(|v| v.iter().copied().collect()).collect(),
            inputs: u.iter().map(|v| v.iter().copied().collect()).collect(),
            outputs: x.iter().map(|v| (&c * v).iter().copied().collect()).collect(),
            h1,
            h2,
            cost: trace.cost,
            sqp_iterations: trace.iterations_used(),
            converged: trace.converged,
            infeasible: trace.infeasible,
            nominal_inside: trace.iterations.iter().map(|i| i.nominal_inside).sum(),
            wall_time_s: wall,
        });
        x = next;
        warm = match shift_warm_start(model.as_ref(), &trace.nominal, &x) {
            Ok(w) => w,
            Err(e) => {
                log.abort = Some(format!("t = {t}: {e}"));
                break;
            }
        };
    }
    log.final_states = x.iter().map(|v| v.iter().copied().collect()).collect();
    Ok(log)
}
