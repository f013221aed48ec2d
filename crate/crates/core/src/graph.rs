//! Directed communication topology between agents.
//!
//! Convention: `a[i][j] > 0` means agent `i` receives information from agent
//! `j`, i.e. the directed edge is `j -> i` and `j` is an in-neighbor of `i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("adjacency matrix must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency weight a[{i}][{j}] = {value} must be finite and non-negative")]
    InvalidWeight { i: usize, j: usize, value: f64 },
    #[error("self-loop on agent {0} is not allowed")]
    SelfLoop(usize),
    #[error("agent index {index} out of range for {n_agents} agents")]
    IndexOutOfRange { index: usize, n_agents: usize },
}

/// Weighted directed graph over `n_agents` nodes. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct Topology {
    adjacency: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    adjacency: Vec<Vec<f64>>,
}

impl TryFrom<TopologyRepr> for Topology {
    type Error = GraphError;

    fn try_from(repr: TopologyRepr) -> Result<Self, Self::Error> {
        Topology::from_rows(&repr.adjacency)
    }
}

impl From<Topology> for TopologyRepr {
    fn from(t: Topology) -> Self {
        let n = t.n_agents();
        TopologyRepr {
            adjacency: (0..n).map(|i| (0..n).map(|j| t.adjacency[(i, j)]).collect()).collect(),
        }
    }
}

impl Topology {
    pub fn new(adjacency: DMatrix<f64>) -> Result<Self, GraphError> {
        let (rows, cols) = adjacency.shape();
        if rows != cols || rows == 0 {
            return Err(GraphError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            for j in 0..cols {
                let value = adjacency[(i, j)];
                if !value.is_finite() || value < 0.0 {
                    return Err(GraphError::InvalidWeight { i, j, value });
                }
                if i == j && value != 0.0 {
                    return Err(GraphError::SelfLoop(i));
                }
            }
        }
        Ok(Self { adjacency })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(GraphError::NotSquare {
                rows: n,
                cols: bad.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Unit-weight graph from directed edges `(from, to)`, 0-based.
    pub fn from_edges(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut adjacency = DMatrix::zeros(n_agents, n_agents);
        for &(from, to) in edges {
            for index in [from, to] {
                if index >= n_agents {
                    return Err(GraphError::IndexOutOfRange { index, n_agents });
                }
            }
            adjacency[(to, from)] = 1.0;
        }
        Self::new(adjacency)
    }

    /// Graph with no edges.
    pub fn empty(n_agents: usize) -> Self {
        Self {
            adjacency: DMatrix::zeros(n_agents, n_agents),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    /// `L = D - A` with `D` the in-degree matrix.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_agents();
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            let degree: f64 = self.adjacency.row(i).iter().sum();
            l[(i, i)] = degree;
        }
        l
    }

    pub fn in_neighbors(&self, i: usize) -> Result<Vec<usize>, GraphError> {
        let n = self.n_agents();
        if i >= n {
            return Err(GraphError::IndexOutOfRange { index: i, n_agents: n });
        }
        Ok((0..n).filter(|&j| self.adjacency[(i, j)] > 0.0).collect())
    }

    /// All directed edges as `(j, i)` pairs (information flows `j -> i`),
    /// ordered by receiving agent then sender.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_agents();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[(i, j)] > 0.0 {
                    edges.push((j, i));
                }
            }
        }
        edges
    }

    /// Agents with no in-neighbors.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.n_agents())
            .filter(|&i| self.adjacency.row(i).iter().all(|&w| w == 0.0))
            .collect()
    }

    /// True iff some node reaches every other node along directed edges.
    pub fn has_spanning_tree(&self) -> bool {
        (0..self.n_agents()).any(|root| self.reachable_from(root).iter().all(|&r| r))
    }

    fn reachable_from(&self, root: usize) -> Vec<bool> {
        let n = self.n_agents();
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(j) = stack.pop() {
            for i in 0..n {
                if !seen[i] && self.adjacency[(i, j)] > 0.0 {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen
    }
}
