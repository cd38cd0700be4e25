//! Per-modality patient graphs built by K-nearest neighbours.

use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Symmetric binary patient graph with an empty diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalGraph {
    n: usize,
    k: usize,
    adjacency: Vec<bool>,
}

/// A [`ModalGraph`] with self-loops added and row degrees cached.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfLoopGraph {
    n: usize,
    adjacency_hat: Vec<bool>,
    degree: Vec<usize>,
}

impl ModalGraph {
    /// Builds a graph directly from an adjacency list of undirected edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![false; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::dim("graph", format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            if i == j {
                return Err(Error::Contract(format!("self-loop ({i}, {i}) in a modal graph")));
            }
            adjacency[i * n + j] = true;
            adjacency[j * n + i] = true;
        }
        Ok(Self { n, k: 0, adjacency })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Neighbour count used at construction (0 for hand-built graphs).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i * self.n..(i + 1) * self.n]
            .iter()
            .filter(|&&e| e)
            .count()
    }

    /// Undirected edges `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        bool_matrix(self.n, &self.adjacency)
    }

    /// Writes one `i j` line per undirected edge, zero-indexed.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, j) in self.edges() {
            writeln!(out, "{i} {j}")?;
        }
        Ok(())
    }

    pub fn save_edge_list(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_edge_list(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

impl SelfLoopGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency_hat[i * self.n + j]
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    pub fn to_tensor(&self) -> Tensor {
        bool_matrix(self.n, &self.adjacency_hat)
    }
}

fn bool_matrix(n: usize, bits: &[bool]) -> Tensor {
    let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::matrix(n, n, data).expect("n*n entries")
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Symmetric-OR KNN graph over the rows of `features`.
///
/// Row `j` is a neighbour of row `i` when it is among the `k` smallest
/// Euclidean distances from `i`, ties going to the lower row index. Edge
/// `(i, j)` exists when either endpoint selected the other.
pub fn knn_build(features: &Tensor, k: usize) -> Result<ModalGraph> {
    let (n, _) = features.expect_matrix("knn_build")?;
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k >= n {
        return Err(Error::Config(format!(
            "k = {k} needs at least {} patients, got {n}",
            k + 1
        )));
    }
    if !features.all_finite() {
        return Err(Error::Data("features contain non-finite values".into()));
    }
    let mut adjacency = vec![false; n * n];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        let xi = features.row(i);
        order.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(xi, features.row(j)), j)),
        );
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &order[..k] {
            adjacency[i * n + j] = true;
            adjacency[j * n + i] = true;
        }
    }
    Ok(ModalGraph { n, k, adjacency })
}

/// Neighbour count used when the configuration does not give one:
/// 10 for cohorts of at least 100 patients, otherwise `max(2, n / 10)`,
/// never more than `n - 1`.
pub fn default_k(n: usize) -> usize {
    let k = if n >= 100 { 10 } else { (n / 10).max(2) };
    k.min(n.saturating_sub(1)).max(1)
}

pub fn with_self_loops(g: &ModalGraph) -> SelfLoopGraph {
    let n = g.n;
    let mut adjacency_hat = g.adjacency.clone();
    for i in 0..n {
        adjacency_hat[i * n + i] = true;
    }
    let degree = (0..n)
        .map(|i| adjacency_hat[i * n..(i + 1) * n].iter().filter(|&&e| e).count())
        .collect();
    SelfLoopGraph {
        n,
        adjacency_hat,
        degree,
    }
}

/// Symmetric GCN normalisation `D^{-1/2} Â D^{-1/2}`.
pub fn gcn_normalize(g: &SelfLoopGraph) -> Tensor {
    let n = g.n;
    let inv_sqrt: Vec<f64> = g.degree.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if g.has_edge(i, j) {
                out.set(i, j, inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    out
}
