use super::{barrier_values, Scenario};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Everything logged at one control step. States, outputs and barrier
/// values are measured before the input is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    /// Inter-agent barrier per edge, in [`RunLog::edges`] order.
    pub h1: Vec<f64>,
    /// Obstacle barrier per agent and obstacle.
    pub h2: Vec<Vec<f64>>,
    /// Optimal CMPC cost.
    pub cost: f64,
    pub sqp_iterations: usize,
    pub converged: bool,
    pub infeasible: bool,
    /// Tangent cuts built from nominals inside their disc, summed over SQP
    /// iterations.
    pub nominal_inside: usize,
    /// Seconds spent in the SQP solve.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub code_version: String,
    pub scenario: Scenario,
    /// `(j, i)` pairs, information flowing `j -> i`.
    pub edges: Vec<(usize, usize)>,
    pub steps: Vec<StepRecord>,
    /// State after the last applied input.
    pub final_states: Vec<Vec<f64>>,
    /// Set when the loop stopped early on an unrecoverable error.
    pub abort: Option<String>,
}

impl RunLog {
    pub fn new(scenario: &Scenario) -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: scenario.clone(),
            edges: scenario.topology.edges(),
            steps: Vec::new(),
            final_states: Vec::new(),
            abort: None,
        }
    }

    /// Largest `||y_i - y_j||` over edges at step `t`.
    pub fn consensus_error(&self, t: usize) -> f64 {
        let y = &self.steps[t].outputs;
        self.edges
            .iter()
            .map(|&(j, i)| {
                y[i].iter()
                    .zip(&y[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Copy with every wall-clock field zeroed, for bit-exact comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.steps {
            s.wall_time_s = 0.0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epsilon: f64,
    /// First step from which the consensus error stays `<= epsilon`.
    pub consensus_time: Option<usize>,
    pub final_consensus_error: f64,
    /// Minima over all logged steps and the final state; `+inf` when there
    /// is nothing to measure.
    pub min_h1: f64,
    pub min_h2: f64,
    /// Steps with `J(t+1) > J(t) + 1e-6`.
    pub cost_increases: usize,
    /// Same, restricted to `t >= 10`.
    pub cost_increases_after_10: usize,
    pub peak_cost: f64,
    pub final_cost: f64,
    /// Applied input components outside the box by more than `1e-9`.
    pub input_violations: usize,
    pub infeasible_steps: usize,
    pub unconverged_steps: usize,
    pub mean_wall_time_s: f64,
    pub max_wall_time_s: f64,
    /// Mean SQP iterations over `t >= 10`; `NaN` for shorter runs.
    pub mean_iterations_after_10: f64,
    pub max_iterations_first_4: usize,
}

const COST_TOL: f64 = 1e-6;
const INPUT_TOL: f64 = 1e-9;

pub fn metrics(log: &RunLog, epsilon: f64) -> Metrics {
    let steps = &log.steps;
    let n = steps.len();

    let errors: Vec<f64> = (0..n).map(|t| log.consensus_error(t)).collect();
    let consensus_time = match errors.iter().rposition(|&e| e > epsilon) {
        None => Some(0),
        Some(last) if last + 1 < n => Some(last + 1),
        Some(_) => None,
    };

    let mut min_h1 = f64::INFINITY;
    let mut min_h2 = f64::INFINITY;
    for s in steps {
        min_h1 = s.h1.iter().copied().fold(min_h1, f64::min);
        min_h2 = s.h2.iter().flatten().copied().fold(min_h2, f64::min);
    }
    if !log.final_states.is_empty() {
        if let Ok(model) = log.scenario.model() {
            let xs: Vec<DVector<f64>> = log.final_states.iter().map(|x| DVector::from_column_slice(x)).collect();
            let (h1, h2) = barrier_values(&log.scenario, model.as_ref(), &xs);
            min_h1 = h1.into_iter().fold(min_h1, f64::min);
            min_h2 = h2.into_iter().flatten().fold(min_h2, f64::min);
        }
    }

    let increases: Vec<usize> = steps
        .windows(2)
        .filter(|w| w[1].cost > w[0].cost + COST_TOL)
        .map(|w| w[0].t)
        .collect();

    let b = &log.scenario.bounds;
    let input_violations = steps
        .iter()
        .flat_map(|s| s.inputs.iter())
        .map(|u| {
            u.iter()
                .enumerate()
                .filter(|&(q, &v)| v < b.u_min[q] - INPUT_TOL || v > b.u_max[q] + INPUT_TOL)
                .count()
        })
        .sum();

    let walls: Vec<f64> = steps.iter().map(|s| s.wall_time_s).collect();
    let late: Vec<f64> = steps
        .iter()
        .filter(|s| s.t >= 10)
        .map(|s| s.sqp_iterations as f64)
        .collect();

    Metrics {
        epsilon,
        consensus_time,
        final_consensus_error: errors.last().copied().unwrap_or(0.0),
        min_h1,
        min_h2,
        cost_increases: increases.len(),
        cost_increases_after_10: increases.iter().filter(|&&t| t >= 10).count(),
        peak_cost: steps.iter().map(|s| s.cost).fold(f64::NEG_INFINITY, f64::max),
        final_cost: steps.last().map_or(f64::NAN, |s| s.cost),
        input_violations,
        infeasible_steps: steps.iter().filter(|s| s.infeasible).count(),
        unconverged_steps: steps.iter().filter(|s| !s.converged).count(),
        mean_wall_time_s: mean(&walls),
        max_wall_time_s: walls.iter().copied().fold(0.0, f64::max),
        mean_iterations_after_10: mean(&late),
        max_iterations_first_4: steps.iter().take(4).map(|s| s.sqp_iterations).max().unwrap_or(0),
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
