//! Influential-node selection from shortest-path statistics, and the
//! per-node domain-specific representations used by the invariance loss.
//!
//! For node i with one-hop neighborhood N_i, a node u is influential when its
//! mean shortest-path distance to N_i is at most `l_star` and its mean
//! shortest-path count to N_i is at least `p_star`. The selected nodes induce
//! a subgraph of the domain graph; its mean-pooled encoder output is the
//! domain representation h_i. Selection depends on topology only, never on
//! features.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gcn::{stack_backward, stack_forward, GcnStack, StackTrace};
use crate::graph::{induced_subgraph, normalized_adjacency, Graph};
use crate::params::ParamStore;

/// All-pairs shortest-path distances (hops) and shortest-path counts.
///
/// `dist` is infinite for unreachable pairs; `num_sp` is 0 there and 1 on the
/// diagonal. Counts are exact for values below 2^53.
#[derive(Debug, Clone)]
pub struct PathStats {
    pub dist: Array2<f64>,
    pub num_sp: Array2<f64>,
}

/// BFS from every node with the standard path-counting recurrence:
/// when `dist[w] == dist[u] + 1`, `count[w] += count[u]`.
pub fn path_stats(g: &Graph) -> PathStats {
    let n = g.num_nodes;
    let adj = g.neighbor_lists();
    let mut dist = Array2::from_elem((n, n), f64::INFINITY);
    let mut num_sp = Array2::zeros((n, n));
    let mut queue = std::collections::VecDeque::new();
    for s in 0..n {
        dist[(s, s)] = 0.0;
        num_sp[(s, s)] = 1.0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let du = dist[(s, u)];
            let cu = num_sp[(s, u)];
            for &w in &adj[u] {
                if dist[(s, w)].is_infinite() {
                    dist[(s, w)] = du + 1.0;
                    num_sp[(s, w)] = cu;
                    queue.push_back(w);
                } else if dist[(s, w)] == du + 1.0 {
                    num_sp[(s, w)] += cu;
                }
            }
        }
    }
    PathStats { dist, num_sp }
}

/// Mean over `targets` of `row[t]`; infinite if any target is unreachable.
fn mean_over(row: ndarray::ArrayView1<f64>, targets: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &t in targets {
        sum += row[t];
    }
    sum / targets.len() as f64
}

/// Influential nodes for node `i`: every u != i whose mean distance to the
/// one-hop neighborhood of i is at most `l_star` and whose mean shortest-path
/// count is at least `p_star`.
///
/// Fallbacks for degenerate cases: an empty selection falls back to the
/// neighborhood itself; an isolated node falls back to `{i}`.
pub fn select_influential(
    stats: &PathStats,
    g: &Graph,
    i: usize,
    l_star: f64,
    p_star: f64,
) -> Vec<usize> {
    let neighbors = one_hop(g, i);
    if neighbors.is_empty() {
        return vec![i];
    }
    let mut selected = Vec::new();
    for u in 0..g.num_nodes {
        if u == i {
            continue;
        }
        let mean_dist = mean_over(stats.dist.row(u), &neighbors);
        let mean_paths = mean_over(stats.num_sp.row(u), &neighbors);
        if mean_dist <= l_star && mean_paths >= p_star {
            selected.push(u);
        }
    }
    if selected.is_empty() {
        neighbors
    } else {
        selected
    }
}

fn one_hop(g: &Graph, i: usize) -> Vec<usize> {
    let mut ns = Vec::new();
    for &(u, v) in &g.edges {
        if u == i {
            ns.push(v);
        } else if v == i {
            ns.push(u);
        }
    }
    ns.sort_unstable();
    ns.dedup();
    ns
}

/// Per-node influential sets for a whole graph, with the thresholds that
/// produced them.
#[derive(Debug, Clone)]
pub struct DomainSelection {
    pub per_node: Vec<Vec<usize>>,
    pub l_star: f64,
    pub p_star: f64,
}

impl DomainSelection {
    /// Fraction of graph nodes selected for node `i`.
    pub fn coverage_ratio(&self, i: usize, num_nodes: usize) -> f64 {
        self.per_node[i].len() as f64 / num_nodes as f64
    }
}

/// Run [`select_influential`] for every node of `g`.
pub fn select_all(g: &Graph, l_star: f64, p_star: f64) -> DomainSelection {
    let stats = path_stats(g);
    let per_node = (0..g.num_nodes)
        .map(|i| select_influential(&stats, g, i, l_star, p_star))
        .collect();
    DomainSelection {
        per_node,
        l_star,
        p_star,
    }
}

/// Graph-level tasks have no external domain graph, so the same selection
/// rule runs within the input graph itself. Coverage is measured, never
/// enforced.
pub fn graph_level_selection(g: &Graph, l_star: f64, p_star: f64) -> DomainSelection {
    select_all(g, l_star, p_star)
}

/// JSON-serializable diagnostic: per-node selected sets and coverage ratios.
#[derive(Debug, Serialize)]
pub struct SelectionReport {
    pub l_star: f64,
    pub p_star: f64,
    pub selected: Vec<Vec<usize>>,
    pub coverage: Vec<f64>,
    pub mean_coverage: f64,
}

pub fn selection_report(g: &Graph, selection: &DomainSelection) -> SelectionReport {
    let coverage: Vec<f64> = (0..g.num_nodes)
        .map(|i| selection.coverage_ratio(i, g.num_nodes))
        .collect();
    let mean_coverage = coverage.iter().sum::<f64>() / coverage.len().max(1) as f64;
    SelectionReport {
        l_star: selection.l_star,
        p_star: selection.p_star,
        selected: selection.per_node.clone(),
        coverage,
        mean_coverage,
    }
}

/// A cached induced subgraph ready for encoding: node list, propagation
/// operator, and feature rows from the domain graph.
pub struct SubgraphContext {
    pub nodes: Vec<usize>,
    pub ahat: Array2<f64>,
    pub features: Array2<f64>,
}

/// Everything the invariance loss needs about one domain graph, computed
/// once and reused across training steps: the selection and one encoder-ready
/// subgraph per node (deduplicated by node set).
pub struct DomainContext {
    pub selection: DomainSelection,
    per_node: Vec<Arc<SubgraphContext>>,
}

impl DomainContext {
    pub fn build(g: &Graph, l_star: f64, p_star: f64) -> Self {
        let selection = select_all(g, l_star, p_star);
        let mut dedup: HashMap<&[usize], Arc<SubgraphContext>> = HashMap::new();
        let mut per_node = Vec::with_capacity(g.num_nodes);
        for nodes in &selection.per_node {
            let ctx = match dedup.get(nodes.as_slice()) {
                Some(ctx) => Arc::clone(ctx),
                None => {
                    let (sub, _) = induced_subgraph(g, nodes);
                    let ctx = Arc::new(SubgraphContext {
                        nodes: nodes.clone(),
                        ahat: normalized_adjacency(&sub),
                        features: sub.features,
                    });
                    dedup.insert(nodes.as_slice(), Arc::clone(&ctx));
                    ctx
                }
            };
            per_node.push(ctx);
        }
        // keys borrow from `selection.per_node`, which lives in self
        drop(dedup);
        DomainContext {
            selection,
            per_node,
        }
    }

    pub fn subgraph(&self, node: usize) -> &SubgraphContext {
        &self.per_node[node]
    }
}

/// Forward pass for one node's domain representation: encode its influential
/// subgraph and mean-pool the node outputs.
pub fn domain_rep_forward(
    store: &ParamStore,
    encoder: &GcnStack,
    ctx: &SubgraphContext,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ndarray::Array1<f64>, StackTrace)> {
    let trace = stack_forward(store, encoder, &ctx.ahat, &ctx.features, train, rng)?;
    let s = trace.output.nrows() as f64;
    let h = trace.output.sum_axis(Axis(0)) / s;
    Ok((h, trace))
}

/// Backward pass for one node's domain representation.
pub fn domain_rep_backward(
    store: &mut ParamStore,
    encoder: &GcnStack,
    ctx: &SubgraphContext,
    trace: &StackTrace,
    d_h: &ndarray::Array1<f64>,
) {
    let s = trace.output.nrows();
    let row = d_h / s as f64;
    let mut d_out = Array2::zeros(trace.output.dim());
    for i in 0..s {
        d_out.row_mut(i).assign(&row);
    }
    stack_backward(store, encoder, &ctx.ahat, trace, &d_out, false, false);
}

/// Domain-specific representation matrix for every node of `g` (row i is
/// h_i), using the given selection. Evaluation path: dropout off.
pub fn domain_representation(
    store: &ParamStore,
    encoder: &GcnStack,
    g: &Graph,
    selection: &DomainSelection,
) -> Result<Array2<f64>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d_out = encoder.output_dim(store);
    let mut h = Array2::zeros((g.num_nodes, d_out));
    for i in 0..g.num_nodes {
        let (sub, _) = induced_subgraph(g, &selection.per_node[i]);
        let ctx = SubgraphContext {
            nodes: selection.per_node[i].clone(),
            ahat: normalized_adjacency(&sub),
            features: sub.features,
        };
        let (hi, _) = domain_rep_forward(store, encoder, &ctx, false, &mut rng)?;
        h.row_mut(i).assign(&hi);
    }
    Ok(h)
}
