//! Deterministic generators for synthetic distribution-shifted benchmarks.
//!
//! Two families:
//!
//! - A node-level feature-mixing benchmark: per-domain random graphs whose
//!   node labels come from a frozen random GCN, with observed features that
//!   interpolate between label-derived features and domain-keyed spurious
//!   features. The interpolation weight (`bias_ratio`) controls how severe
//!   the distribution shift is.
//! - A graph-level base/motif benchmark: each graph is a base (tree, ladder,
//!   wheel) bridged to a motif (cycle, house, crane). The label is the motif;
//!   the training split correlates the base with the label at rate `b`, while
//!   the test split draws the base uniformly.
//!
//! Both generators are pure functions of (config, seed): the same inputs
//! produce byte-identical bundles.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{DomainedDataset, DomainedExample, Graph, Task};

pub use crate::bundle::{read_bundle, write_bundle};

/// Configuration for the node-level feature-mixing benchmark.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixShiftConfig {
    /// Domains are split 1 train / 1 valid / rest test.
    pub num_domains: usize,
    pub nodes_per_domain: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// 0 = purely label-derived features, 1 = purely domain-keyed features.
    pub bias_ratio: f64,
    pub edge_prob: f64,
    pub seed: u64,
}

impl Default for MixShiftConfig {
    fn default() -> Self {
        MixShiftConfig {
            num_domains: 10,
            nodes_per_domain: 200,
            num_classes: 10,
            feature_dim: 16,
            bias_ratio: 0.0,
            edge_prob: 0.025,
            seed: 0,
        }
    }
}

impl MixShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias_ratio) {
            return Err(Error::Config("bias_ratio must lie in [0, 1]".into()));
        }
        if self.num_domains < 3 {
            return Err(Error::Config(
                "num_domains must be at least 3 for a 1/1/rest split".into(),
            ));
        }
        if self.num_classes < 2 || self.nodes_per_domain == 0 || self.feature_dim == 0 {
            return Err(Error::Config("degenerate mix-shift dimensions".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::Config("edge_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Configuration for the graph-level base/motif benchmark.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotifConfig {
    /// Training-split probability that the base kind equals the motif kind.
    pub b: f64,
    /// Total graphs; split 80% train / 10% valid / 10% test.
    pub num_graphs: usize,
    pub seed: u64,
}

impl Default for MotifConfig {
    fn default() -> Self {
        MotifConfig {
            b: 0.9,
            num_graphs: 3000,
            seed: 0,
        }
    }
}

impl MotifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config("b must lie in [0, 1]".into()));
        }
        if self.num_graphs < 10 {
            return Err(Error::Config("num_graphs must be at least 10".into()));
        }
        Ok(())
    }
}

/// How strongly the spurious generator keys on the domain one-hot relative
/// to the label one-hot.
const DOMAIN_GAIN: f64 = 3.0;
/// Scale of the noise added to motif node features.
const MOTIF_NOISE: f64 = 0.1;

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xd1342543de82ef95))
}

fn erdos_renyi(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * scale
    })
}

fn one_hot(indices: &[usize], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((indices.len(), width));
    for (row, &idx) in indices.iter().enumerate() {
        m[(row, idx)] = 1.0;
    }
    m
}

/// Frozen random networks that define the labeling and feature processes.
/// Shared across domains, so the label mechanism is invariant by
/// construction; only the domain one-hot input varies.
struct FrozenNets {
    label_w1: Array2<f64>,
    label_w2: Array2<f64>,
    label_feat_w: Array2<f64>,
    spurious_w1: Array2<f64>,
    spurious_w2: Array2<f64>,
}

impl FrozenNets {
    fn new(cfg: &MixShiftConfig, rng: &mut ChaCha8Rng) -> Self {
        let hidden = 16;
        let scale1 = (2.0 / cfg.feature_dim as f64).sqrt();
        let scale2 = (2.0 / hidden as f64).sqrt();
        let label_w1 = gaussian_matrix(cfg.feature_dim, hidden, scale1, rng);
        let label_w2 = gaussian_matrix(hidden, cfg.num_classes, scale2, rng);
        let label_feat_w = gaussian_matrix(cfg.num_classes, cfg.feature_dim, 1.0, rng);
        // Two layers with a ReLU between: the hidden nonlinearity makes the
        // label encoding itself domain-dependent, which is what turns these
        // features spurious rather than a benign constant offset.
        let mut spurious_w1 = gaussian_matrix(
            cfg.num_classes + cfg.num_domains,
            hidden,
            (2.0 / cfg.num_classes as f64).sqrt(),
            rng,
        );
        let spurious_w2 = gaussian_matrix(hidden, cfg.feature_dim, 2.0 * scale2, rng);
        for i in cfg.num_classes..cfg.num_classes + cfg.num_domains {
            for j in 0..hidden {
                spurious_w1[(i, j)] *= DOMAIN_GAIN;
            }
        }
        FrozenNets {
            label_w1,
            label_w2,
            label_feat_w,
            spurious_w1,
            spurious_w2,
        }
    }

    fn labels(&self, ahat: &Array2<f64>, x1: &Array2<f64>) -> Vec<usize> {
        let h = ahat.dot(&ahat.dot(x1).dot(&self.label_w1).mapv(|v| v.max(0.0)));
        let mut logits = h.dot(&self.label_w2);
        // center each output column over the graph before the argmax;
        // raw random-GCN logits are globally correlated and would give one
        // class a large majority
        for c in 0..logits.ncols() {
            let mean = logits.column(c).sum() / logits.nrows() as f64;
            logits.column_mut(c).mapv_inplace(|v| v - mean);
        }
        logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect()
    }

    fn label_features(&self, ahat: &Array2<f64>, labels_oh: &Array2<f64>) -> Array2<f64> {
        ahat.dot(labels_oh).dot(&self.label_feat_w)
    }

    fn spurious_features(&self, ahat: &Array2<f64>, input: &Array2<f64>) -> Array2<f64> {
        let hidden = ahat.dot(input).dot(&self.spurious_w1).mapv(|v| v.max(0.0));
        ahat.dot(&hidden).dot(&self.spurious_w2)
    }
}

/// Generate the node-level feature-mixing dataset.
///
/// At `bias_ratio` 0 the observed features are a function of the labels and
/// the graph alone; at 1 they are purely the domain-keyed spurious features.
/// A draw whose training domain misses a class is regenerated with an
/// incremented sub-seed, up to 10 attempts.
pub fn generate_mix_shift(cfg: &MixShiftConfig) -> Result<DomainedDataset> {
    cfg.validate()?;
    for attempt in 0..10 {
        let ds = generate_mix_shift_attempt(cfg, attempt)?;
        let mut present = vec![false; cfg.num_classes];
        for (_, ex) in ds.examples_in(&ds.train_domains.clone()) {
            present[ex.label] = true;
        }
        if present.iter().all(|&p| p) {
            return Ok(ds);
        }
    }
    Err(Error::Synthesis(format!(
        "training domain missed a class in 10 attempts (num_classes = {})",
        cfg.num_classes
    )))
}

fn generate_mix_shift_attempt(cfg: &MixShiftConfig, attempt: u64) -> Result<DomainedDataset> {
    let base_seed = sub_seed(cfg.seed, attempt);
    let mut net_rng = ChaCha8Rng::seed_from_u64(sub_seed(base_seed, 0));
    let nets = FrozenNets::new(cfg, &mut net_rng);

    let mut examples = Vec::new();
    for domain in 0..cfg.num_domains {
        // Structure and labels depend only on (seed, domain), never on the
        // bias ratio, so a ratio sweep reuses identical graphs and labels.
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(base_seed, 1 + domain as u64));
        let n = cfg.nodes_per_domain;
        let edges = erdos_renyi(n, cfg.edge_prob, &mut rng);
        let x1 = gaussian_matrix(n, cfg.feature_dim, 1.0, &mut rng);
        let skeleton = Graph::new(n, edges.clone(), Array2::zeros((n, 1)), None)?;
        let ahat = crate::graph::normalized_adjacency(&skeleton);

        let labels = nets.labels(&ahat, &x1);
        let labels_oh = one_hot(&labels, cfg.num_classes);
        let x_label = nets.label_features(&ahat, &labels_oh);

        let mut spur_input = Array2::zeros((n, cfg.num_classes + cfg.num_domains));
        spur_input
            .slice_mut(ndarray::s![.., ..cfg.num_classes])
            .assign(&labels_oh);
        for i in 0..n {
            spur_input[(i, cfg.num_classes + domain)] = 1.0;
        }
        let x_spur = nets.spurious_features(&ahat, &spur_input);

        let features = &x_label * (1.0 - cfg.bias_ratio) + &x_spur * cfg.bias_ratio;
        let graph = Arc::new(Graph::new(n, edges, features, None)?);
        for (node, &label) in labels.iter().enumerate() {
            examples.push(DomainedExample {
                graph: Arc::clone(&graph),
                label,
                domain_id: domain as i64,
                center_node: Some(node),
            });
        }
    }

    let ds = DomainedDataset {
        examples,
        num_classes: cfg.num_classes,
        task: Task::NodeLevel,
        train_domains: vec![0],
        valid_domains: vec![1],
        test_domains: (2..cfg.num_domains as i64).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Base-graph kinds, indexed 0..3 to match the motif kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    Tree = 0,
    Ladder = 1,
    Wheel = 2,
}

/// Motif kinds; the graph label equals the motif index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotifKind {
    Cycle = 0,
    House = 1,
    Crane = 2,
}

const BASE_KINDS: [BaseKind; 3] = [BaseKind::Tree, BaseKind::Ladder, BaseKind::Wheel];
const MOTIF_KINDS: [MotifKind; 3] = [MotifKind::Cycle, MotifKind::House, MotifKind::Crane];

fn base_edges(kind: BaseKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match kind {
        BaseKind::Tree => {
            // random attachment tree
            (1..n).map(|i| (rng.gen_range(0..i), i)).collect()
        }
        BaseKind::Ladder => {
            let half = n / 2;
            let mut edges = Vec::new();
            for i in 0..half - 1 {
                edges.push((i, i + 1));
                edges.push((half + i, half + i + 1));
            }
            for i in 0..half {
                edges.push((i, half + i));
            }
            // odd leftover node hangs off the last rung
            if n % 2 == 1 {
                edges.push((n - 2, n - 1));
            }
            edges
        }
        BaseKind::Wheel => {
            let mut edges = Vec::new();
            for i in 1..n {
                edges.push((0, i));
            }
            for i in 1..n - 1 {
                edges.push((i, i + 1));
            }
            edges.push((n - 1, 1));
            edges
        }
    }
}

/// All motifs have 5 nodes. The crane is a house with one roof edge removed.
fn motif_edges(kind: MotifKind) -> Vec<(usize, usize)> {
    match kind {
        MotifKind::Cycle => vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
        MotifKind::House => vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4)],
        MotifKind::Crane => vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 4)],
    }
}

const MOTIF_NODES: usize = 5;

fn build_motif_graph(
    base: BaseKind,
    motif: MotifKind,
    rng: &mut ChaCha8Rng,
) -> Result<Graph> {
    let base_n = rng.gen_range(10..=15);
    let mut edges = base_edges(base, base_n, rng);
    let offset = base_n;
    for (u, v) in motif_edges(motif) {
        edges.push((offset + u, offset + v));
    }
    // one bridging edge keeps the graph connected
    let bridge_base = rng.gen_range(0..base_n);
    let bridge_motif = offset + rng.gen_range(0..MOTIF_NODES);
    edges.push((bridge_base, bridge_motif));

    let n = base_n + MOTIF_NODES;
    let mut features = Array2::zeros((n, 2));
    for i in 0..n {
        let role = usize::from(i >= offset);
        features[(i, role)] = 1.0;
        for j in 0..2 {
            let noise: f64 = rng.sample(StandardNormal);
            features[(i, j)] += MOTIF_NOISE * noise;
        }
    }
    Graph::new(n, edges, features, None)
}

fn draw_base(motif: MotifKind, b: f64, rng: &mut ChaCha8Rng) -> BaseKind {
    let u: f64 = rng.gen();
    if u < b {
        BASE_KINDS[motif as usize]
    } else if u < b + (1.0 - b) / 2.0 {
        BASE_KINDS[(motif as usize + 1) % 3]
    } else {
        BASE_KINDS[(motif as usize + 2) % 3]
    }
}

/// Generate the graph-level base/motif dataset. Domain 0 is the biased
/// training split, domain 1 the validation split, domain 2 the test split;
/// validation and test draw the base uniformly and independently.
pub fn generate_sp_motif(cfg: &MotifConfig) -> Result<DomainedDataset> {
    cfg.validate()?;
    let n_train = cfg.num_graphs * 8 / 10;
    let n_valid = cfg.num_graphs / 10;
    let n_test = cfg.num_graphs - n_train - n_valid;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0x5a));

    let mut examples = Vec::with_capacity(cfg.num_graphs);
    for (domain, count) in [(0i64, n_train), (1, n_valid), (2, n_test)] {
        for _ in 0..count {
            let motif = MOTIF_KINDS[rng.gen_range(0..3)];
            let base = if domain == 0 {
                draw_base(motif, cfg.b, &mut rng)
            } else {
                BASE_KINDS[rng.gen_range(0..3)]
            };
            let graph = build_motif_graph(base, motif, &mut rng)?;
            examples.push(DomainedExample {
                graph: Arc::new(graph),
                label: motif as usize,
                domain_id: domain,
                center_node: None,
            });
        }
    }
    let ds = DomainedDataset {
        examples,
        num_classes: 3,
        task: Task::GraphLevel,
        train_domains: vec![0],
        valid_domains: vec![1],
        test_domains: vec![2],
    };
    ds.validate()?;
    Ok(ds)
}

/// Base kind of a motif-benchmark graph, recovered from its structure for
/// test oracles: the split point is fixed, so the base is the induced graph
/// on the first `n - 5` nodes.
pub fn classify_base_structure(g: &Graph) -> Option<BaseKind> {
    let base_n = g.num_nodes - MOTIF_NODES;
    let base_edge_count = g
        .edges
        .iter()
        .filter(|&&(u, v)| u < base_n && v < base_n)
        .count();
    // tree: n-1 edges; ladder: ~3n/2 - 2; wheel: 2(n-1)
    if base_edge_count == base_n - 1 {
        Some(BaseKind::Tree)
    } else if base_edge_count == 2 * (base_n - 1) {
        Some(BaseKind::Wheel)
    } else {
        Some(BaseKind::Ladder)
    }
}
