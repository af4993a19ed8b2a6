//! Client-to-cluster assignment and the cluster-head mixing matrix.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, StreamKind};

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("need 1 <= C <= K, got C={clusters}, K={clients}")]
    ClusterCount { clients: usize, clusters: usize },
    #[error("ring mixing needs at least 3 heads, got {0}")]
    RingTooSmall(usize),
    #[error("mixing matrix must be square, row {row} has {len} entries for {n} rows")]
    NotSquare { row: usize, len: usize, n: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("client {client} assigned to cluster {cluster}, but only {clusters} clusters exist")]
    BadAssignment {
        client: usize,
        cluster: usize,
        clusters: usize,
    },
}

/// Non-overlapping assignment of `K` clients to `C` cluster-heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLayout {
    /// `assignment[k]` is the cluster of client `k`.
    assignment: Vec<usize>,
    /// Members of each cluster in ascending client id.
    members: Vec<Vec<usize>>,
}

impl ClusterLayout {
    pub fn from_assignment(assignment: Vec<usize>, clusters: usize) -> Result<Self, TopologyError> {
        let mut members = vec![Vec::new(); clusters];
        for (client, &cluster) in assignment.iter().enumerate() {
            if cluster >= clusters {
                return Err(TopologyError::BadAssignment {
                    client,
                    cluster,
                    clusters,
                });
            }
            members[cluster].push(client);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(TopologyError::EmptyCluster(c));
        }
        Ok(Self {
            assignment,
            members,
        })
    }

    /// Everyone in one cluster.
    pub fn single(clients: usize) -> Result<Self, TopologyError> {
        Self::from_assignment(vec![0; clients], 1)
    }

    /// Every client its own cluster.
    pub fn singletons(clients: usize) -> Result<Self, TopologyError> {
        Self::from_assignment((0..clients).collect(), clients)
    }

    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn cluster_of(&self, client: usize) -> usize {
        self.assignment[client]
    }

    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.members[cluster]
    }

    /// `K_c` for every cluster.
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

/// Uniformly random balanced partition: cluster sizes differ by at most one.
pub fn random_clusters(
    clients: usize,
    clusters: usize,
    seed: u64,
) -> Result<ClusterLayout, TopologyError> {
    if clusters == 0 || clusters > clients {
        return Err(TopologyError::ClusterCount { clients, clusters });
    }
    let mut rng = stream(seed, StreamKind::Layout, &[clients as u64, clusters as u64]);
    let mut order: Vec<usize> = (0..clients).collect();
    order.shuffle(&mut rng);
    // Which clusters receive the extra member is also random.
    let mut slots: Vec<usize> = (0..clusters).collect();
    slots.shuffle(&mut rng);
    let base = clients / clusters;
    let extra = clients % clusters;
    let mut assignment = vec![0; clients];
    let mut pos = 0;
    for (rank, &c) in slots.iter().enumerate() {
        let size = base + usize::from(rank < extra);
        for &client in &order[pos..pos + size] {
            assignment[client] = c;
        }
        pos += size;
    }
    ClusterLayout::from_assignment(assignment, clusters)
}

/// Row-major `C × C` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    weights: Vec<Vec<f64>>,
}

impl MixingMatrix {
    pub fn from_rows(weights: Vec<Vec<f64>>) -> Result<Self, TopologyError> {
        let n = weights.len();
        for (row, r) in weights.iter().enumerate() {
            if r.len() != n {
                return Err(TopologyError::NotSquare {
                    row,
                    len: r.len(),
                    n,
                });
            }
        }
        Ok(Self { weights })
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c]
    }

    pub fn get(&self, c: usize, j: usize) -> f64 {
        self.weights[c][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Number of nonzero off-diagonal entries in row `c`.
    pub fn degree(&self, c: usize) -> usize {
        self.weights[c]
            .iter()
            .enumerate()
            .filter(|&(j, &w)| j != c && w != 0.0)
            .count()
    }
}

/// `W(c,j) = 1/(C−1)` off the diagonal; the 1×1 zero matrix for `C = 1`.
pub fn mixing_uniform_complete(heads: usize) -> MixingMatrix {
    let off = if heads > 1 {
        1.0 / (heads - 1) as f64
    } else {
        0.0
    };
    let weights = (0..heads)
        .map(|c| (0..heads).map(|j| if c == j { 0.0 } else { off }).collect())
        .collect();
    MixingMatrix { weights }
}

/// Each head weights its two ring neighbours by 1/2.
pub fn mixing_ring(heads: usize) -> Result<MixingMatrix, TopologyError> {
    if heads < 3 {
        return Err(TopologyError::RingTooSmall(heads));
    }
    let mut weights = vec![vec![0.0; heads]; heads];
    for (c, row) in weights.iter_mut().enumerate() {
        row[(c + 1) % heads] = 0.5;
        row[(c + heads - 1) % heads] = 0.5;
    }
    Ok(MixingMatrix { weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MixingReport {
    pub symmetric: bool,
    pub zero_diagonal: bool,
    pub nonnegative: bool,
    /// Rows sum to one within 1e-12 (vacuously true for `C = 1`).
    pub row_stochastic: bool,
}

impl MixingReport {
    pub fn all_pass(&self) -> bool {
        self.symmetric && self.zero_diagonal && self.nonnegative && self.row_stochastic
    }
}

pub fn validate_mixing(w: &MixingMatrix) -> MixingReport {
    let n = w.size();
    let mut report = MixingReport {
        symmetric: true,
        zero_diagonal: true,
        nonnegative: true,
        row_stochastic: true,
    };
    for c in 0..n {
        if w.get(c, c) != 0.0 {
            report.zero_diagonal = false;
        }
        for j in 0..n {
            if w.get(c, j) != w.get(j, c) {
                report.symmetric = false;
            }
            if !(w.get(c, j) >= 0.0) {
                report.nonnegative = false;
            }
        }
        if n >= 2 && (w.row(c).iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            report.row_stochastic = false;
        }
    }
    report
}
