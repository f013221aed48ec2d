//! Safe output consensus for multi-agent systems by centralized model
//! predictive control.
//!
//! The controller iterates convex QPs around a nominal trajectory: dynamics
//! are linearized along the nominal, circular keep-out regions are replaced
//! by tangent half-planes, and a discrete-time high-order control barrier
//! function turns each half-plane into linear constraints with a relaxation
//! slack. [`sim`] closes the loop on the nonlinear plant.

pub mod barrier;
pub mod cmpc;
pub mod dynamics;
pub mod graph;
pub mod qp;
pub mod sim;

pub use barrier::{AffineBarrier, BarrierError, BarrierParams, CircularObstacle};
pub use cmpc::{Bounds, Cmpc, CmpcConfig, CmpcError, LeaderMode, NominalTrajectory, SqpTrace};
pub use dynamics::{DynamicsError, PlantModel, UnicycleModel};
pub use graph::{GraphError, Topology};
pub use qp::{QpError, QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
pub use sim::{metrics, run_closed_loop, ExportError, Metrics, RunLog, Scenario, ScenarioError};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Cmpc(#[from] CmpcError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Export(#[from] ExportError),
}
