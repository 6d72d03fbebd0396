//! Communication graph of the agent network.
//!
//! Row `i` of the adjacency matrix lists the agents whose state agent `i`
//! receives: `a_ij > 0` means information flows from `j` to `i`. The
//! optional leader vector holds the pinning weights `a_i0`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("adjacency matrix must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("self-loop at agent {}: diagonal entry must be zero", .0 + 1)]
    SelfLoop(usize),
    #[error("negative or non-finite weight {weight} at row {}, column {}", .row + 1, .col + 1)]
    InvalidWeight { row: usize, col: usize, weight: f64 },
    #[error("undirected topology requires a symmetric adjacency matrix (mismatch at row {}, column {})", .row + 1, .col + 1)]
    Asymmetric { row: usize, col: usize },
    #[error("leader vector has length {got}, expected {expected}")]
    LeaderLength { got: usize, expected: usize },
    #[error("negative or non-finite leader weight {weight} for agent {}", .agent + 1)]
    InvalidLeaderWeight { agent: usize, weight: f64 },
    #[error("agent index {index} out of range for {n_agents} agents")]
    IndexOutOfRange { index: usize, n_agents: usize },
    #[error("topology has no leader adjacency")]
    MissingLeader,
}

/// Weak and strong connectivity of the graph.
///
/// For undirected graphs both flags coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connectivity {
    pub weak: bool,
    pub strong: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    adjacency: DMatrix<f64>,
    leader: Option<DVector<f64>>,
    directed: bool,
}

impl Topology {
    pub fn new(
        adjacency: DMatrix<f64>,
        leader: Option<DVector<f64>>,
        directed: bool,
    ) -> Result<Self, TopologyError> {
        let errors = Self::check(&adjacency, leader.as_ref(), directed);
        match errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(Self {
                adjacency,
                leader,
                directed,
            }),
        }
    }

    /// Builds a topology from an augmented matrix whose diagonal carries the
    /// leader weights `a_i0` and whose off-diagonal part is the adjacency.
    pub fn from_augmented(augmented: DMatrix<f64>, directed: bool) -> Result<Self, TopologyError> {
        if augmented.nrows() != augmented.ncols() || augmented.nrows() == 0 {
            return Err(TopologyError::NotSquare {
                rows: augmented.nrows(),
                cols: augmented.ncols(),
            });
        }
        let leader = augmented.diagonal();
        let mut adjacency = augmented;
        adjacency.fill_diagonal(0.0);
        Self::new(adjacency, Some(leader), directed)
    }

    /// Returns every invariant violation, not only the first one.
    pub fn check(
        adjacency: &DMatrix<f64>,
        leader: Option<&DVector<f64>>,
        directed: bool,
    ) -> Vec<TopologyError> {
        let mut errors = Vec::new();
        let (rows, cols) = adjacency.shape();
        if rows != cols || rows == 0 {
            errors.push(TopologyError::NotSquare { rows, cols });
            return errors;
        }
        for i in 0..rows {
            if adjacency[(i, i)] != 0.0 {
                errors.push(TopologyError::SelfLoop(i));
            }
            for j in 0..cols {
                let w = adjacency[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    errors.push(TopologyError::InvalidWeight {
                        row: i,
                        col: j,
                        weight: w,
                    });
                }
                if !directed && j > i && adjacency[(i, j)] != adjacency[(j, i)] {
                    errors.push(TopologyError::Asymmetric { row: i, col: j });
                }
            }
        }
        if let Some(leader) = leader {
            if leader.len() != rows {
                errors.push(TopologyError::LeaderLength {
                    got: leader.len(),
                    expected: rows,
                });
            } else {
                for (agent, &w) in leader.iter().enumerate() {
                    if !w.is_finite() || w < 0.0 {
                        errors.push(TopologyError::InvalidLeaderWeight { agent, weight: w });
                    }
                }
            }
        }
        errors
    }

    pub fn n_agents(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn leader_adjacency(&self) -> Option<&DVector<f64>> {
        self.leader.as_ref()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    /// Pinning weight `a_i0`; zero when the topology has no leader.
    pub fn leader_weight(&self, i: usize) -> f64 {
        self.leader.as_ref().map_or(0.0, |l| l[i])
    }

    fn check_index(&self, i: usize) -> Result<(), TopologyError> {
        if i >= self.n_agents() {
            Err(TopologyError::IndexOutOfRange {
                index: i,
                n_agents: self.n_agents(),
            })
        } else {
            Ok(())
        }
    }

    /// `{ j : a_ij > 0 }` in increasing order.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>, TopologyError> {
        self.check_index(i)?;
        Ok((0..self.n_agents())
            .filter(|&j| self.adjacency[(i, j)] > 0.0)
            .collect())
    }

    /// Weighted in-degree `Σ_j a_ij`.
    pub fn in_degree(&self, i: usize) -> f64 {
        self.adjacency.row(i).sum()
    }

    /// Degree matrix `D = diag(Σ_j a_ij)` and Laplacian `L = D - A`.
    pub fn degree_and_laplacian(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n_agents();
        let degrees = DVector::from_iterator(n, (0..n).map(|i| self.in_degree(i)));
        let degree = DMatrix::from_diagonal(&degrees);
        let laplacian = &degree - &self.adjacency;
        (degree, laplacian)
    }

    /// `H = A + diag(a_i0)`.
    pub fn augmented_matrix(&self) -> Result<DMatrix<f64>, TopologyError> {
        let leader = self.leader.as_ref().ok_or(TopologyError::MissingLeader)?;
        Ok(&self.adjacency + DMatrix::from_diagonal(leader))
    }

    pub fn connectivity(&self) -> Connectivity {
        let n = self.n_agents();
        let any_edge =
            |i: usize, j: usize| self.adjacency[(i, j)] > 0.0 || self.adjacency[(j, i)] > 0.0;
        let weak = reach_all(n, any_edge);
        // Edge j -> i whenever a_ij > 0; strong connectivity needs both
        // directions reachable from node 0.
        let forward = reach_all(n, |from, to| self.adjacency[(to, from)] > 0.0);
        let backward = reach_all(n, |from, to| self.adjacency[(from, to)] > 0.0);
        Connectivity {
            weak,
            strong: forward && backward,
        }
    }

    /// Weak connectivity (identical to plain connectivity when undirected).
    pub fn is_connected(&self) -> bool {
        self.connectivity().weak
    }

    /// Relabels agents so that new agent `k` is old agent `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, TopologyError> {
        let n = self.n_agents();
        let adjacency = DMatrix::from_fn(n, n, |r, c| self.adjacency[(perm[r], perm[c])]);
        let leader = self
            .leader
            .as_ref()
            .map(|l| DVector::from_iterator(n, perm.iter().map(|&p| l[p])));
        Self::new(adjacency, leader, self.directed)
    }
}

fn reach_all(n: usize, edge: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for (v, flag) in seen.iter_mut().enumerate() {
            if !*flag && edge(u, v) {
                *flag = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}
