//! Two-layer GCN building block with explicit backward passes, plus the
//! classifier head used on both raw graphs and generated subgraphs.
//!
//! Per layer: `out = ReLU(Ahat · dropout(input) · W)`, no bias, no activation
//! after the last layer. Dropout uses inverted scaling so evaluation is the
//! identity path. Backward passes are hand-derived and verified against
//! finite differences.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::GeneratedSubgraph;
use crate::graph::{
    normalized_adjacency, normalized_adjacency_backward, normalized_adjacency_dense, Graph,
};
use crate::params::ParamStore;

/// A stack of GCN layers referencing weights by name in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GcnStack {
    /// Parameter names, applied in order; each is `[d_in x d_out]`.
    pub weights: Vec<String>,
    pub dropout_rate: f64,
}

impl GcnStack {
    pub fn new(weights: Vec<String>, dropout_rate: f64) -> Self {
        assert!((0.0..1.0).contains(&dropout_rate));
        GcnStack {
            weights,
            dropout_rate,
        }
    }

    /// Register a stack's weights with the given layer widths.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        dropout_rate: f64,
    ) -> Self {
        let mut weights = Vec::new();
        for l in 0..dims.len() - 1 {
            let name = format!("{prefix}.w{l}");
            store.register(&name, dims[l], dims[l + 1]);
            weights.push(name);
        }
        GcnStack::new(weights, dropout_rate)
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.value(&self.weights[0]).nrows()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weights.last().unwrap()).ncols()
    }
}

/// Intermediates kept for the backward pass.
pub struct StackTrace {
    masks: Vec<Option<Array2<f64>>>,
    dropped: Vec<Array2<f64>>,
    propagated: Vec<Array2<f64>>,
    pre_act: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Forward pass through the stack. `ahat` is the propagation operator for
/// the graph the inputs live on.
pub fn stack_forward(
    store: &ParamStore,
    stack: &GcnStack,
    ahat: &Array2<f64>,
    input: &Array2<f64>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StackTrace> {
    let layers = stack.weights.len();
    let mut masks = Vec::with_capacity(layers);
    let mut dropped = Vec::with_capacity(layers);
    let mut propagated = Vec::with_capacity(layers);
    let mut pre_act = Vec::with_capacity(layers);

    let mut x = input.clone();
    for (l, name) in stack.weights.iter().enumerate() {
        let w = store.value(name);
        if x.ncols() != w.nrows() {
            return Err(Error::ShapeMismatch {
                context: format!("gcn layer '{name}'"),
                expected: format!("input with {} columns", w.nrows()),
                actual: format!("{} columns", x.ncols()),
            });
        }
        let (d, mask) = apply_dropout(&x, stack.dropout_rate, train, rng);
        let p = ahat.dot(&d);
        let u = p.dot(w);
        masks.push(mask);
        dropped.push(d);
        propagated.push(p);
        x = if l + 1 < layers {
            u.mapv(|v| v.max(0.0))
        } else {
            u.clone()
        };
        pre_act.push(u);
    }
    Ok(StackTrace {
        masks,
        dropped,
        propagated,
        pre_act,
        output: x,
    })
}

/// Backward pass. Accumulates weight gradients into the store and returns
/// the requested input and propagation-operator gradients.
pub fn stack_backward(
    store: &mut ParamStore,
    stack: &GcnStack,
    ahat: &Array2<f64>,
    trace: &StackTrace,
    d_output: &Array2<f64>,
    want_d_input: bool,
    want_d_ahat: bool,
) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
    let layers = stack.weights.len();
    let mut d_ahat = want_d_ahat.then(|| Array2::zeros(ahat.dim()));
    let mut g = d_output.clone();
    for l in (0..layers).rev() {
        let d_u = if l + 1 < layers {
            let mut d = g.clone();
            d.zip_mut_with(&trace.pre_act[l], |dv, &u| {
                if u <= 0.0 {
                    *dv = 0.0;
                }
            });
            d
        } else {
            g
        };
        let d_w = trace.propagated[l].t().dot(&d_u);
        let d_p = d_u.dot(&store.value(&stack.weights[l]).t());
        store.accumulate_grad(&stack.weights[l], &d_w);
        if let Some(da) = d_ahat.as_mut() {
            *da += &d_p.dot(&trace.dropped[l].t());
        }
        if l == 0 && !want_d_input {
            return (None, d_ahat);
        }
        let mut d_x = ahat.t().dot(&d_p);
        if let Some(mask) = &trace.masks[l] {
            d_x *= mask;
        }
        g = d_x;
    }
    (Some(g), d_ahat)
}

fn apply_dropout(
    x: &Array2<f64>,
    rate: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Option<Array2<f64>>) {
    if !train || rate == 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_fn(x.dim(), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    (x * &mask, Some(mask))
}

/// Run a stack over a graph's propagation operator and return the output.
pub fn gcn_forward(
    store: &ParamStore,
    stack: &GcnStack,
    g: &Graph,
    inputs: &Array2<f64>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let ahat = normalized_adjacency(g);
    Ok(stack_forward(store, stack, &ahat, inputs, train, rng)?.output)
}

/// How node outputs collapse to a single representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Node-level tasks: the center node's row.
    CenterNode,
    /// Graph-level tasks: mean over all node rows.
    MeanPool,
}

/// GCN backbone plus a linear head producing class probabilities.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub backbone: GcnStack,
    pub readout: Readout,
    pub head_w: String,
    pub head_b: String,
}

impl Classifier {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        num_classes: usize,
        readout: Readout,
        dropout_rate: f64,
    ) -> Self {
        let backbone = GcnStack::register(store, prefix, dims, dropout_rate);
        let head_w = format!("{prefix}.head_w");
        let head_b = format!("{prefix}.head_b");
        store.register(&head_w, *dims.last().unwrap(), num_classes);
        store.register(&head_b, 1, num_classes);
        Classifier {
            backbone,
            readout,
            head_w,
            head_b,
        }
    }
}

/// Input to [`classify`]: a raw graph or a generated subgraph whose
/// continuous edge weights drive the propagation operator.
pub enum ClassifyInput<'a> {
    Graph(&'a Graph),
    Generated(&'a GeneratedSubgraph),
}

/// Intermediates for the classifier backward pass.
pub struct ClassifyTrace {
    ahat: Array2<f64>,
    row_sums: Vec<f64>,
    generated: bool,
    stack: StackTrace,
    pooled: Array2<f64>,
    center: Option<usize>,
    pub probs: Vec<f64>,
}

/// Class probabilities for a graph or generated subgraph.
pub fn classify(
    store: &ParamStore,
    clf: &Classifier,
    input: ClassifyInput,
    center: Option<usize>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifyTrace> {
    if clf.readout == Readout::CenterNode && center.is_none() {
        return Err(Error::MissingCenter);
    }
    let (ahat, row_sums, features, generated) = match input {
        ClassifyInput::Graph(g) => {
            let (ahat, sums) = normalized_adjacency_dense(&g.dense_adjacency());
            (ahat, sums, g.features.clone(), false)
        }
        ClassifyInput::Generated(sub) => {
            let (ahat, sums) = normalized_adjacency_dense(&sub.edge_weight);
            (ahat, sums, sub.gen_features.clone(), true)
        }
    };
    let stack = stack_forward(store, &clf.backbone, &ahat, &features, train, rng)?;
    let n = stack.output.nrows();
    let pooled = match clf.readout {
        Readout::CenterNode => {
            let c = center.unwrap();
            stack.output.row(c).insert_axis(ndarray::Axis(0)).to_owned()
        }
        Readout::MeanPool => {
            (stack.output.sum_axis(ndarray::Axis(0)) / n as f64).insert_axis(ndarray::Axis(0))
        }
    };
    let logits = pooled.dot(store.value(&clf.head_w)) + store.value(&clf.head_b);
    let probs = softmax(logits.row(0).as_slice().unwrap());
    Ok(ClassifyTrace {
        ahat,
        row_sums,
        generated,
        stack,
        pooled,
        center,
        probs,
    })
}

/// Gradients produced by the classifier backward pass.
pub struct ClassifyGrads {
    /// d loss / d input features.
    pub d_features: Array2<f64>,
    /// d loss / d edge-weight matrix (generated inputs only; zero diagonal).
    pub d_edge_weight: Option<Array2<f64>>,
}

/// Backward pass from a gradient on the logits.
pub fn classify_backward(
    store: &mut ParamStore,
    clf: &Classifier,
    trace: &ClassifyTrace,
    d_logits: &[f64],
) -> ClassifyGrads {
    let d_logits = Array2::from_shape_vec((1, d_logits.len()), d_logits.to_vec()).unwrap();
    let d_head_w = trace.pooled.t().dot(&d_logits);
    store.accumulate_grad(&clf.head_w, &d_head_w);
    store.accumulate_grad(&clf.head_b, &d_logits);
    let d_pooled = d_logits.dot(&store.value(&clf.head_w).t());

    let n = trace.stack.output.nrows();
    let d_out = match clf.readout {
        Readout::CenterNode => {
            let mut d = Array2::zeros(trace.stack.output.dim());
            d.row_mut(trace.center.unwrap()).assign(&d_pooled.row(0));
            d
        }
        Readout::MeanPool => {
            let row = &d_pooled / n as f64;
            let mut d = Array2::zeros(trace.stack.output.dim());
            for i in 0..n {
                d.row_mut(i).assign(&row.row(0));
            }
            d
        }
    };
    let (d_features, d_ahat) = stack_backward(
        store,
        &clf.backbone,
        &trace.ahat,
        &trace.stack,
        &d_out,
        true,
        trace.generated,
    );
    let d_edge_weight = d_ahat
        .map(|da| normalized_adjacency_backward(&trace.ahat, &trace.row_sums, &da));
    ClassifyGrads {
        d_features: d_features.unwrap(),
        d_edge_weight,
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn single_layer_identity(store: &mut ParamStore, dim: usize) -> GcnStack {
        store.register("t.w0", dim, dim);
        for i in 0..dim {
            store.get_mut("t.w0").value[(i, i)] = 1.0;
        }
        GcnStack::new(vec!["t.w0".into()], 0.0)
    }

    #[test]
    fn single_node_is_affine_in_its_own_feature() {
        let mut store = ParamStore::new();
        let stack = single_layer_identity(&mut store, 2);
        let g = Graph::new(1, vec![], arr2(&[[3.0, -1.5]]), None).unwrap();
        let out = gcn_forward(&store, &stack, &g, &g.features, false, &mut rng()).unwrap();
        assert_eq!(out, arr2(&[[3.0, -1.5]]));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::new();
        let stack = GcnStack::register(&mut store, "t", &[3, 4, 2], 0.0);
        store.seeded_init(5, "glorot").unwrap();
        let g = Graph::new(2, vec![(0, 1)], Array2::zeros((2, 3)), None).unwrap();
        let out = gcn_forward(&store, &stack, &g, &g.features, false, &mut rng()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_node_single_layer_averages_features() {
        let mut store = ParamStore::new();
        let stack = single_layer_identity(&mut store, 2);
        let g = Graph::new(2, vec![(0, 1)], arr2(&[[2.0, 0.0], [0.0, 4.0]]), None).unwrap();
        let out = gcn_forward(&store, &stack, &g, &g.features, false, &mut rng()).unwrap();
        // Ahat is all 0.5, so both rows equal 0.5*(x0+x1)
        for i in 0..2 {
            assert!((out[(i, 0)] - 1.0).abs() < 1e-15);
            assert!((out[(i, 1)] - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let stack = GcnStack::register(&mut store, "t", &[3, 2], 0.0);
        let g = Graph::new(1, vec![], Array2::zeros((1, 4)), None).unwrap();
        let err = gcn_forward(&store, &stack, &g, &g.features, false, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn eval_mode_is_deterministic_under_dropout() {
        let mut store = ParamStore::new();
        let stack = GcnStack::register(&mut store, "t", &[3, 4, 2], 0.5);
        store.seeded_init(9, "glorot").unwrap();
        let g = Graph::new(
            3,
            vec![(0, 1), (1, 2)],
            arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            None,
        )
        .unwrap();
        let a = gcn_forward(&store, &stack, &g, &g.features, false, &mut rng()).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let b = gcn_forward(&store, &stack, &g, &g.features, false, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_equivariance_on_random_graphs() {
        use rand::seq::SliceRandom;
        let mut seed_rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let n = 8;
            let mut store = ParamStore::new();
            let stack = GcnStack::register(&mut store, "t", &[4, 6, 3], 0.0);
            store.seeded_init(trial, "glorot").unwrap();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if seed_rng.gen::<f64>() < 0.3 {
                        edges.push((i, j));
                    }
                }
            }
            let features = Array2::from_shape_fn((n, 4), |_| seed_rng.gen_range(-1.0..1.0));
            let g = Graph::new(n, edges.clone(), features.clone(), None).unwrap();
            let out = gcn_forward(&store, &stack, &g, &g.features, false, &mut rng()).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut seed_rng);
            let p_edges: Vec<(usize, usize)> =
                edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
            let mut p_features = Array2::zeros((n, 4));
            for i in 0..n {
                p_features.row_mut(perm[i]).assign(&features.row(i));
            }
            let pg = Graph::new(n, p_edges, p_features, None).unwrap();
            let p_out = gcn_forward(&store, &stack, &pg, &pg.features, false, &mut rng()).unwrap();
            for i in 0..n {
                for c in 0..3 {
                    assert!(
                        (out[(i, c)] - p_out[(perm[i], c)]).abs() < 1e-10,
                        "trial {trial}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut store = ParamStore::new();
        let clf = Classifier::register(&mut store, "clf", &[2, 3], 4, Readout::MeanPool, 0.0);
        store.seeded_init(3, "glorot").unwrap();
        store.get_mut("clf.head_w").value.fill(0.0);
        let g = Graph::new(2, vec![(0, 1)], arr2(&[[1.0, 2.0], [0.5, -1.0]]), None).unwrap();
        let trace = classify(
            &store,
            &clf,
            ClassifyInput::Graph(&g),
            None,
            false,
            &mut rng(),
        )
        .unwrap();
        for p in &trace.probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut store = ParamStore::new();
        let clf = Classifier::register(&mut store, "clf", &[3, 4], 5, Readout::CenterNode, 0.0);
        store.seeded_init(11, "glorot").unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let features = Array2::from_shape_fn((4, 3), |_| r.gen_range(-2.0..2.0));
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3)], features, None).unwrap();
        let trace = classify(
            &store,
            &clf,
            ClassifyInput::Graph(&g),
            Some(1),
            false,
            &mut rng(),
        )
        .unwrap();
        let total: f64 = trace.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn center_required_for_node_level_readout() {
        let mut store = ParamStore::new();
        let clf = Classifier::register(&mut store, "clf", &[2, 2], 2, Readout::CenterNode, 0.0);
        let g = Graph::new(1, vec![], Array2::zeros((1, 2)), None).unwrap();
        let res = classify(
            &store,
            &clf,
            ClassifyInput::Graph(&g),
            None,
            false,
            &mut rng(),
        );
        assert!(matches!(res.err(), Some(Error::MissingCenter)));
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        // scalar loss = weighted sum of outputs; checks dW and dX jointly,
        // with dropout active under a frozen mask sequence.
        let mut store = ParamStore::new();
        let stack = GcnStack::register(&mut store, "t", &[3, 5, 2], 0.3);
        store.seeded_init(21, "glorot").unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if r.gen::<f64>() < 0.4 {
                    edges.push((i, j));
                }
            }
        }
        let features = Array2::from_shape_fn((n, 3), |_| r.gen_range(-1.0..1.0));
        let g = Graph::new(n, edges, features, None).unwrap();
        let ahat = normalized_adjacency(&g);
        let weights = Array2::from_shape_fn((n, 2), |_| r.gen_range(-1.0..1.0));

        let loss = |s: &ParamStore| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let t = stack_forward(s, &stack, &ahat, &g.features, true, &mut rng)?;
            Ok((&t.output * &weights).sum())
        };

        store.zero_grads();
        let mut rng_f = ChaCha8Rng::seed_from_u64(1234);
        let trace = stack_forward(&store, &stack, &ahat, &g.features, true, &mut rng_f).unwrap();
        stack_backward(&mut store, &stack, &ahat, &trace, &weights, true, false);

        let report = crate::gradcheck::fd_check(loss, &mut store, 40, 1e-5, 9).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
