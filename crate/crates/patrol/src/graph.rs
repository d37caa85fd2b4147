//! Patrol environment graphs: binary adjacency, integer travel times,
//! validation, JSON load/save and the bundled San Francisco case study.
//!
//! Nodes are indexed 0-based throughout the library. Files and CLI output
//! refer to nodes by their labels; the bundled dataset labels node `i` as
//! `"i"`, so label `"0"` is 0-based node 0 (1-based node 1).

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A patrol environment: waypoints, allowed moves and integer travel times.
///
/// Invariants enforced at construction:
/// - adjacency entries are 0/1 and every row has at least one nonzero entry,
/// - travel times are integers ≥ 1 on every edge,
/// - the directed graph is strongly connected.
#[derive(Debug, Clone, PartialEq)]
pub struct PatrolGraph {
    n: usize,
    adjacency: Array2<u8>,
    weights: Array2<u32>,
    labels: Vec<String>,
}

/// A desired long-run visit-frequency profile over the nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pi: Array1<f64>,
}

impl TargetDistribution {
    /// Validate entries ≥ 0 summing to 1 within 1e-12.
    pub fn new(pi: Array1<f64>) -> Result<Self> {
        if pi.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = pi.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { pi })
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Smallest entry; used to size the return-time entropy horizon.
    pub fn min_entry(&self) -> f64 {
        self.pi.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Restrict to a node subset and renormalize.
    pub fn restrict(&self, nodes: &[usize]) -> Result<Self> {
        let sub: Array1<f64> = nodes.iter().map(|&i| self.pi[i]).collect();
        let sum = sub.sum();
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution(
                "restriction has zero total mass".into(),
            ));
        }
        Self::new(sub.mapv(|x| x / sum))
    }
}

/// On-disk JSON layout; field order here is the canonical save order.
#[derive(Serialize, Deserialize)]
struct GraphFile {
    n: usize,
    adjacency: Vec<Vec<u8>>,
    weights: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl PatrolGraph {
    /// Build a graph from raw parts, enforcing all invariants.
    pub fn new(adjacency: Array2<u8>, weights: Array2<u32>, labels: Vec<String>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::AsymmetricSizes(format!(
                "adjacency is {}x{}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        if weights.nrows() != n || weights.ncols() != n {
            return Err(Error::AsymmetricSizes(format!(
                "weights are {}x{} but adjacency is {n}x{n}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if labels.len() != n {
            return Err(Error::AsymmetricSizes(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[(i, j)];
                if a > 1 {
                    return Err(Error::InvalidAdjacency(i, j));
                }
                if a == 1 && weights[(i, j)] < 1 {
                    return Err(Error::InvalidWeight(i, j));
                }
            }
        }
        for i in 0..n {
            if (0..n).all(|j| adjacency[(i, j)] == 0) {
                return Err(Error::ZeroRow(i));
            }
        }
        let g = Self {
            n,
            adjacency,
            weights,
            labels,
        };
        if !g.is_strongly_connected() {
            return Err(Error::Disconnected);
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &Array2<u8> {
        &self.adjacency
    }

    pub fn weights(&self) -> &Array2<u32> {
        &self.weights
    }

    /// Travel times as floats, for objective arithmetic.
    pub fn weights_f64(&self) -> Array2<f64> {
        self.weights.mapv(|w| w as f64)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Largest travel time over present edges.
    pub fn max_weight(&self) -> u32 {
        let mut m = 0;
        for i in 0..self.n {
            for j in 0..self.n {
                if self.adjacency[(i, j)] == 1 {
                    m = m.max(self.weights[(i, j)]);
                }
            }
        }
        m
    }

    /// Resolve a node reference that is either a label or a 0-based index.
    pub fn resolve_node(&self, name: &str) -> Option<usize> {
        if let Some(pos) = self.labels.iter().position(|l| l == name) {
            return Some(pos);
        }
        name.parse::<usize>().ok().filter(|&i| i < self.n)
    }

    /// Strong-connectivity check: one depth-first pass on the graph and one
    /// on its reverse must each reach every node.
    fn is_strongly_connected(&self) -> bool {
        let reach = |reverse: bool| -> usize {
            let mut seen = vec![false; self.n];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(u) = stack.pop() {
                for v in 0..self.n {
                    let edge = if reverse {
                        self.adjacency[(v, u)]
                    } else {
                        self.adjacency[(u, v)]
                    };
                    if edge == 1 && !seen[v] {
                        seen[v] = true;
                        count += 1;
                        stack.push(v);
                    }
                }
            }
            count
        };
        self.n > 0 && reach(false) == self.n && reach(true) == self.n
    }

    /// Load and validate a graph from the JSON schema
    /// `{ "n": int, "adjacency": [[0|1]], "weights": [[int]], "labels": [string] }`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: GraphFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if file.adjacency.len() != file.n || file.adjacency.iter().any(|r| r.len() != file.n) {
            return Err(Error::AsymmetricSizes(format!(
                "adjacency rows do not form an {0}x{0} matrix",
                file.n
            )));
        }
        if file.weights.len() != file.n || file.weights.iter().any(|r| r.len() != file.n) {
            return Err(Error::AsymmetricSizes(format!(
                "weight rows do not form an {0}x{0} matrix",
                file.n
            )));
        }
        let mut weights = Array2::<u32>::zeros((file.n, file.n));
        for (i, row) in file.weights.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if w.fract() != 0.0 || !w.is_finite() {
                    return Err(Error::NonIntegerWeight(i, j));
                }
                if w < 0.0 || w > u32::MAX as f64 {
                    return Err(Error::InvalidWeight(i, j));
                }
                weights[(i, j)] = w as u32;
            }
        }
        let mut adjacency = Array2::<u8>::zeros((file.n, file.n));
        for (i, row) in file.adjacency.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                adjacency[(i, j)] = a;
            }
        }
        Self::new(adjacency, weights, file.labels)
    }

    /// Save in the canonical JSON layout. `save(load(f))` is bit-identical
    /// for files produced by `save`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = GraphFile {
            n: self.n,
            adjacency: (0..self.n)
                .map(|i| (0..self.n).map(|j| self.adjacency[(i, j)]).collect())
                .collect(),
            weights: (0..self.n)
                .map(|i| (0..self.n).map(|j| self.weights[(i, j)] as f64).collect())
                .collect(),
            labels: self.labels.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("graph serialization");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Restrict to an ordered node subset. The induced graph must itself be
    /// a valid patrol graph (in particular strongly connected).
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::AsymmetricSizes("empty node subset".into()));
        }
        if let Some(&bad) = nodes.iter().find(|&&i| i >= self.n) {
            return Err(Error::DimensionMismatch(format!(
                "node index {bad} out of range for {} nodes",
                self.n
            )));
        }
        let m = nodes.len();
        let mut adjacency = Array2::<u8>::zeros((m, m));
        let mut weights = Array2::<u32>::zeros((m, m));
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                adjacency[(a, b)] = self.adjacency[(i, j)];
                weights[(a, b)] = self.weights[(i, j)];
            }
        }
        let labels = nodes.iter().map(|&i| self.labels[i].clone()).collect();
        Self::new(adjacency, weights, labels)
    }
}

/// The 12-intersection downtown San Francisco case study: a complete graph
/// (self-loops included) with driving times in minutes and a target
/// distribution proportional to monthly crime counts.
pub fn builtin_sf() -> (PatrolGraph, TargetDistribution) {
    const W: [[u32; 12]; 12] = [
        [1, 3, 3, 5, 4, 6, 3, 5, 7, 4, 6, 6],
        [3, 1, 5, 4, 2, 4, 4, 5, 5, 3, 5, 5],
        [3, 5, 1, 7, 6, 8, 3, 4, 9, 4, 8, 7],
        [6, 4, 7, 1, 5, 6, 4, 7, 5, 6, 6, 7],
        [4, 3, 6, 5, 1, 3, 5, 5, 6, 3, 4, 4],
        [6, 4, 8, 5, 3, 1, 6, 7, 3, 6, 2, 3],
        [2, 5, 3, 5, 6, 7, 1, 5, 7, 5, 7, 8],
        [3, 5, 2, 7, 6, 7, 3, 1, 9, 3, 7, 5],
        [8, 6, 9, 4, 6, 4, 6, 9, 1, 8, 5, 7],
        [4, 3, 4, 6, 3, 5, 5, 3, 7, 1, 5, 3],
        [6, 4, 8, 6, 4, 2, 6, 6, 4, 5, 1, 3],
        [6, 4, 6, 6, 3, 3, 6, 4, 5, 3, 2, 1],
    ];
    const CRIME_COUNTS: [f64; 12] = [
        133.0, 90.0, 89.0, 87.0, 83.0, 83.0, 74.0, 64.0, 48.0, 43.0, 38.0, 34.0,
    ];
    let n = 12;
    let adjacency = Array2::<u8>::ones((n, n));
    let mut weights = Array2::<u32>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            weights[(i, j)] = W[i][j];
        }
    }
    let labels = (0..n).map(|i| i.to_string()).collect();
    let graph = PatrolGraph::new(adjacency, weights, labels).expect("bundled dataset is valid");
    let pi = Array1::from_iter(CRIME_COUNTS.iter().map(|&c| c / 866.0));
    let target = TargetDistribution::new(pi).expect("bundled distribution is valid");
    (graph, target)
}
