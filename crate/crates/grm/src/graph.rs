//! Graph representation, ego-network extraction, and the symmetric
//! normalized propagation operator shared by every encoder in the crate.
//!
//! Graphs are undirected, stored as edge lists, and materialized as dense
//! matrices when propagating. Self-loops are never stored; they are injected
//! only inside [`normalized_adjacency`].

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

/// An undirected graph with dense node features and optional edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    /// Unordered node-index pairs; stored with `u < v` after validation.
    pub edges: Vec<(usize, usize)>,
    /// One row per node.
    pub features: Array2<f64>,
    /// Aligned with `edges`; `None` means weight 1.0 everywhere.
    pub edge_weights: Option<Vec<f64>>,
}

/// Every invariant violation found by [`Graph::validate`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

impl Graph {
    /// Build a validated graph. Edge pairs are canonicalized to `u < v`.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Array2<f64>,
        edge_weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let g = Self::new_unchecked(num_nodes, edges, features, edge_weights);
        let report = g.validate();
        if report.is_ok() {
            Ok(g)
        } else {
            Err(Error::InvalidGraph(report))
        }
    }

    /// Build without validation; pair with [`Graph::validate`].
    pub fn new_unchecked(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Array2<f64>,
        edge_weights: Option<Vec<f64>>,
    ) -> Self {
        let edges = edges
            .into_iter()
            .map(|(u, v)| if u <= v { (u, v) } else { (v, u) })
            .collect();
        Graph {
            num_nodes,
            edges,
            features,
            edge_weights,
        }
    }

    /// Check every invariant and report all violations, not just the first.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, &(u, v)) in self.edges.iter().enumerate() {
            if u == v {
                report
                    .violations
                    .push(format!("edge {idx} is a self-loop ({u},{v})"));
            }
            if u >= self.num_nodes || v >= self.num_nodes {
                report.violations.push(format!(
                    "edge {idx} endpoint out of range: ({u},{v}) with {} nodes",
                    self.num_nodes
                ));
            }
            let key = if u <= v { (u, v) } else { (v, u) };
            if !seen.insert(key) {
                report
                    .violations
                    .push(format!("duplicate unordered edge ({},{})", key.0, key.1));
            }
        }
        if self.features.nrows() != self.num_nodes {
            report.violations.push(format!(
                "feature matrix has {} rows, expected {}",
                self.features.nrows(),
                self.num_nodes
            ));
        }
        if let Some(w) = &self.edge_weights {
            if w.len() != self.edges.len() {
                report.violations.push(format!(
                    "{} edge weights for {} edges",
                    w.len(),
                    self.edges.len()
                ));
            }
        }
        report
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn weight(&self, edge_idx: usize) -> f64 {
        self.edge_weights
            .as_ref()
            .map_or(1.0, |w| w[edge_idx])
    }

    /// Dense symmetric adjacency with zero diagonal.
    pub fn dense_adjacency(&self) -> Array2<f64> {
        let n = self.num_nodes;
        let mut a = Array2::zeros((n, n));
        for (idx, &(u, v)) in self.edges.iter().enumerate() {
            let w = self.weight(idx);
            a[(u, v)] += w;
            a[(v, u)] += w;
        }
        a
    }

    /// Adjacency lists ignoring weights.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }
}

/// Symmetric GCN propagation operator `D^{-1/2} (A + I) D^{-1/2}`.
///
/// `D` is the row-sum diagonal of `A + I`, so an isolated node propagates
/// exactly its own state (diagonal entry 1).
pub fn normalized_adjacency(g: &Graph) -> Array2<f64> {
    normalized_adjacency_dense(&g.dense_adjacency()).0
}

/// Same operator from a dense weight matrix (diagonal entries of `weights`
/// are ignored; the self-loop always has weight 1). Returns the operator and
/// the row sums of `A + I`, which the backward pass needs.
pub fn normalized_adjacency_dense(weights: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let n = weights.nrows();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[(i, j)] = weights[(i, j)];
            }
        }
        m[(i, i)] = 1.0;
    }
    let row_sums: Vec<f64> = (0..n).map(|i| m.row(i).sum()).collect();
    let inv_sqrt: Vec<f64> = row_sums.iter().map(|d| 1.0 / d.sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    (m, row_sums)
}

/// Gradient of a scalar loss through [`normalized_adjacency_dense`].
///
/// Given `d_ahat = dL/dAhat`, returns `dL/dweights` for the off-diagonal
/// entries (the diagonal of the input never enters the forward pass).
pub fn normalized_adjacency_backward(
    ahat: &Array2<f64>,
    row_sums: &[f64],
    d_ahat: &Array2<f64>,
) -> Array2<f64> {
    let n = ahat.nrows();
    // Ahat_ij = M_ij / sqrt(d_i d_j) with d_i = sum_l M_il. Perturbing M_kl
    // changes d_k alone, so
    //   dL/dM_kl = G_kl / sqrt(d_k d_l) - (r_k + c_k) / (2 d_k)
    // where r_k = sum_j G_kj Ahat_kj and c_k = sum_i G_ik Ahat_ik.
    let mut row_dot = vec![0.0; n];
    let mut col_dot = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let p = d_ahat[(i, j)] * ahat[(i, j)];
            row_dot[i] += p;
            col_dot[j] += p;
        }
    }
    let mut dw = Array2::zeros((n, n));
    for k in 0..n {
        for l in 0..n {
            if k == l {
                continue;
            }
            dw[(k, l)] = d_ahat[(k, l)] / (row_sums[k] * row_sums[l]).sqrt()
                - (row_dot[k] + col_dot[k]) / (2.0 * row_sums[k]);
        }
    }
    dw
}

/// Induced subgraph on every node within `hops` of `center` (BFS over edges,
/// ignoring weights). Returns the subgraph and the map from new indices to
/// original ones; the center always maps to new index 0.
pub fn ego_network(g: &Graph, center: usize, hops: usize) -> (Graph, Vec<usize>) {
    assert!(center < g.num_nodes, "center {center} out of range");
    let adj = g.neighbor_lists();
    let mut dist = vec![usize::MAX; g.num_nodes];
    let mut order = vec![center];
    dist[center] = 0;
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        if dist[u] == hops {
            continue;
        }
        for &w in &adj[u] {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                order.push(w);
                queue.push_back(w);
            }
        }
    }
    induced_subgraph(g, &order)
}

/// Induced subgraph on `nodes` (kept in the given order). The second return
/// value is the same `nodes` list, mapping new indices to original ones.
pub fn induced_subgraph(g: &Graph, nodes: &[usize]) -> (Graph, Vec<usize>) {
    let mut new_index = vec![usize::MAX; g.num_nodes];
    for (new, &orig) in nodes.iter().enumerate() {
        new_index[orig] = new;
    }
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for (idx, &(u, v)) in g.edges.iter().enumerate() {
        let (nu, nv) = (new_index[u], new_index[v]);
        if nu != usize::MAX && nv != usize::MAX {
            edges.push((nu, nv));
            weights.push(g.weight(idx));
        }
    }
    let mut features = Array2::zeros((nodes.len(), g.feature_dim()));
    for (new, &orig) in nodes.iter().enumerate() {
        features.row_mut(new).assign(&g.features.row(orig));
    }
    let edge_weights = g.edge_weights.as_ref().map(|_| weights);
    (
        Graph::new_unchecked(nodes.len(), edges, features, edge_weights),
        nodes.to_vec(),
    )
}

/// Node- or graph-level classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    NodeLevel,
    GraphLevel,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::NodeLevel => "node-level",
            Task::GraphLevel => "graph-level",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "node-level" => Ok(Task::NodeLevel),
            "graph-level" => Ok(Task::GraphLevel),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected 'node-level' or 'graph-level')"
            ))),
        }
    }
}

/// One labeled example: a graph tagged with its domain, plus the center node
/// for node-level tasks. The graph is shared so node-level datasets do not
/// duplicate their domain graphs in memory.
#[derive(Debug, Clone)]
pub struct DomainedExample {
    pub graph: Arc<Graph>,
    pub label: usize,
    pub domain_id: i64,
    pub center_node: Option<usize>,
}

/// A dataset whose examples are partitioned into train/valid/test domains.
#[derive(Debug, Clone)]
pub struct DomainedDataset {
    pub examples: Vec<DomainedExample>,
    pub num_classes: usize,
    pub task: Task,
    pub train_domains: Vec<i64>,
    pub valid_domains: Vec<i64>,
    pub test_domains: Vec<i64>,
}

impl DomainedDataset {
    /// Check the dataset-level invariants: disjoint domain lists, every
    /// example's domain in exactly one list, labels within range, centers
    /// within range.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self
            .train_domains
            .iter()
            .chain(&self.valid_domains)
            .chain(&self.test_domains)
        {
            if !seen.insert(*id) {
                return Err(Error::Config(format!(
                    "domain {id} appears in more than one split"
                )));
            }
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if !seen.contains(&ex.domain_id) {
                return Err(Error::Config(format!(
                    "example {i} has domain {} which is in no split",
                    ex.domain_id
                )));
            }
            if ex.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "example {i} has label {} but num_classes is {}",
                    ex.label, self.num_classes
                )));
            }
            if let Some(c) = ex.center_node {
                if c >= ex.graph.num_nodes {
                    return Err(Error::Config(format!(
                        "example {i} has center_node {c} but only {} nodes",
                        ex.graph.num_nodes
                    )));
                }
            }
            let report = ex.graph.validate();
            if !report.is_ok() {
                return Err(Error::InvalidGraph(report));
            }
        }
        Ok(())
    }

    pub fn examples_in<'a>(
        &'a self,
        domains: &'a [i64],
    ) -> impl Iterator<Item = (usize, &'a DomainedExample)> + 'a {
        self.examples
            .iter()
            .enumerate()
            .filter(move |(_, ex)| domains.contains(&ex.domain_id))
    }
}
