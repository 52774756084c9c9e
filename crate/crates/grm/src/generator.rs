//! Variational generator for invariant subgraphs: encode an input graph to
//! per-node latents, sample by reparameterization, then decode generated
//! node features and a continuous edge-weight matrix.
//!
//! Edge weights are never thresholded: `e_ij = sigmoid(<f(z_i), f(z_j)>)`
//! stays strictly inside (0, 1) and the output keeps the input's node count.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::gcn::{stack_backward, stack_forward, GcnStack, StackTrace};
use crate::graph::{normalized_adjacency, Graph};
use crate::params::ParamStore;

/// Per-node latent state. `z = mu + exp(log_sigma) * noise` holds exactly.
pub struct LatentState {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
    pub z: Array2<f64>,
    /// The frozen standard-normal draw (zero when sampling is disabled).
    pub noise: Array2<f64>,
}

/// A generated subgraph: same node count as the input, generated features,
/// and a symmetric edge-weight matrix with entries strictly inside (0, 1).
/// Diagonal entries are defined but ignored by propagation.
pub struct GeneratedSubgraph {
    pub num_nodes: usize,
    pub gen_features: Array2<f64>,
    pub edge_weight: Array2<f64>,
}

/// Generator parameters: the two GCN encoders plus the feature and edge
/// projection heads, all referenced by name in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub encoder_mu: GcnStack,
    pub encoder_sigma: GcnStack,
    pub w_x: String,
    pub b_x: String,
    pub w_e: String,
    pub b_e: String,
    pub d_z: usize,
    pub d_e: usize,
}

impl GeneratorParams {
    /// Register all generator parameters. `d_in` is the encoder input width,
    /// `d_x` the feature width to reconstruct.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_z: usize,
        d_e: usize,
        d_x: usize,
        dropout_rate: f64,
    ) -> Self {
        let encoder_mu =
            GcnStack::register(store, &format!("{prefix}.mu"), &[d_in, hidden, d_z], dropout_rate);
        let encoder_sigma = GcnStack::register(
            store,
            &format!("{prefix}.sigma"),
            &[d_in, hidden, d_z],
            dropout_rate,
        );
        let w_x = format!("{prefix}.w_x");
        let b_x = format!("{prefix}.b_x");
        let w_e = format!("{prefix}.w_e");
        let b_e = format!("{prefix}.b_e");
        store.register(&w_x, d_z, d_x);
        store.register(&b_x, 1, d_x);
        store.register(&w_e, d_z, d_e);
        store.register(&b_e, 1, d_e);
        GeneratorParams {
            encoder_mu,
            encoder_sigma,
            w_x,
            b_x,
            w_e,
            b_e,
            d_z,
            d_e,
        }
    }
}

/// Encoder intermediates for the backward pass.
pub struct EncodeTrace {
    pub mu_trace: StackTrace,
    pub sigma_trace: StackTrace,
}

/// Encode an input matrix over a fixed propagation operator.
///
/// When `stochastic` is false the noise is zero and `z = mu` exactly (the
/// deterministic-generator ablation and the evaluation path).
pub fn encode_from_input(
    store: &ParamStore,
    params: &GeneratorParams,
    ahat: &Array2<f64>,
    input: &Array2<f64>,
    stochastic: bool,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentState, EncodeTrace)> {
    let mu_trace = stack_forward(store, &params.encoder_mu, ahat, input, train, rng)?;
    let sigma_trace = stack_forward(store, &params.encoder_sigma, ahat, input, train, rng)?;
    let mu = mu_trace.output.clone();
    let log_sigma = sigma_trace.output.clone();
    let noise = if stochastic {
        Array2::from_shape_fn(mu.dim(), |_| rng.sample(StandardNormal))
    } else {
        Array2::zeros(mu.dim())
    };
    let z = &mu + &(log_sigma.mapv(f64::exp) * &noise);
    Ok((
        LatentState {
            mu,
            log_sigma,
            z,
            noise,
        },
        EncodeTrace {
            mu_trace,
            sigma_trace,
        },
    ))
}

/// Encode a graph using its own features as encoder input.
pub fn encode(
    store: &ParamStore,
    params: &GeneratorParams,
    g: &Graph,
    stochastic: bool,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentState, EncodeTrace)> {
    let ahat = normalized_adjacency(g);
    encode_from_input(store, params, &ahat, &g.features, stochastic, train, rng)
}

/// Backpropagate gradients on `mu` and `log_sigma` into both encoder stacks.
/// Returns the gradient on the encoder input when requested.
pub fn encode_backward(
    store: &mut ParamStore,
    params: &GeneratorParams,
    ahat: &Array2<f64>,
    trace: &EncodeTrace,
    d_mu: &Array2<f64>,
    d_log_sigma: &Array2<f64>,
    want_d_input: bool,
) -> Option<Array2<f64>> {
    let (d_in_mu, _) = stack_backward(
        store,
        &params.encoder_mu,
        ahat,
        &trace.mu_trace,
        d_mu,
        want_d_input,
        false,
    );
    let (d_in_sigma, _) = stack_backward(
        store,
        &params.encoder_sigma,
        ahat,
        &trace.sigma_trace,
        d_log_sigma,
        want_d_input,
        false,
    );
    match (d_in_mu, d_in_sigma) {
        (Some(a), Some(b)) => Some(a + b),
        _ => None,
    }
}

/// Generated node features: row i is `W_x z_i + b_x`.
pub fn decode_features(store: &ParamStore, params: &GeneratorParams, z: &Array2<f64>) -> Array2<f64> {
    z.dot(store.value(&params.w_x)) + store.value(&params.b_x)
}

/// Backward for [`decode_features`]; returns the gradient on `z`.
pub fn decode_features_backward(
    store: &mut ParamStore,
    params: &GeneratorParams,
    z: &Array2<f64>,
    d_xhat: &Array2<f64>,
) -> Array2<f64> {
    let d_w = z.t().dot(d_xhat);
    let d_b = d_xhat.sum_axis(Axis(0)).insert_axis(Axis(0));
    store.accumulate_grad(&params.w_x, &d_w);
    store.accumulate_grad(&params.b_x, &d_b);
    d_xhat.dot(&store.value(&params.w_x).t())
}

/// Edge-decoder intermediates.
pub struct EdgeTrace {
    /// `f = z W_e + b_e`, one row per node.
    pub f: Array2<f64>,
    pub edge_weight: Array2<f64>,
}

/// Continuous edge weights `e_ij = sigmoid(<f_i, f_j>)`, computed once per
/// unordered pair and mirrored so the matrix is exactly symmetric.
pub fn decode_edges(store: &ParamStore, params: &GeneratorParams, z: &Array2<f64>) -> EdgeTrace {
    let f = z.dot(store.value(&params.w_e)) + store.value(&params.b_e);
    let n = z.nrows();
    let mut e = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = f.row(i).dot(&f.row(j));
            let w = stable_sigmoid(s);
            e[(i, j)] = w;
            e[(j, i)] = w;
        }
    }
    EdgeTrace { f, edge_weight: e }
}

/// Backward for [`decode_edges`] from a gradient on the full edge-weight
/// matrix (diagonal included); returns the gradient on `z`.
pub fn decode_edges_backward(
    store: &mut ParamStore,
    params: &GeneratorParams,
    z: &Array2<f64>,
    trace: &EdgeTrace,
    d_edge: &Array2<f64>,
) -> Array2<f64> {
    // dS = dE * e * (1 - e), then dF = (dS + dS^T) F.
    let e = &trace.edge_weight;
    let d_s = d_edge * e * &e.mapv(|v| 1.0 - v);
    let d_f = (&d_s + &d_s.t()).dot(&trace.f);
    let d_w = z.t().dot(&d_f);
    let d_b = d_f.sum_axis(Axis(0)).insert_axis(Axis(0));
    store.accumulate_grad(&params.w_e, &d_w);
    store.accumulate_grad(&params.b_e, &d_b);
    d_f.dot(&store.value(&params.w_e).t())
}

/// Full generation pipeline intermediates.
pub struct GenerateTrace {
    pub encode: EncodeTrace,
    pub edges: EdgeTrace,
}

/// Generate an invariant subgraph for `g`: encode, sample, decode features
/// and edges. Returns the latent state as well, since every loss needs it.
pub fn generate(
    store: &ParamStore,
    params: &GeneratorParams,
    g: &Graph,
    stochastic: bool,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(GeneratedSubgraph, LatentState, GenerateTrace)> {
    let (latent, encode_trace) = encode(store, params, g, stochastic, train, rng)?;
    let gen_features = decode_features(store, params, &latent.z);
    let edges = decode_edges(store, params, &latent.z);
    let sub = GeneratedSubgraph {
        num_nodes: g.num_nodes,
        gen_features,
        edge_weight: edges.edge_weight.clone(),
    };
    Ok((
        sub,
        latent,
        GenerateTrace {
            encode: encode_trace,
            edges,
        },
    ))
}

/// Sigmoid with a branch per sign and a final clamp into the largest open
/// interval (0, 1) representable at double precision.
pub fn stable_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let t = x.exp();
        t / (1.0 + t)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(d_x: usize, d_z: usize, n: usize, seed: u64) -> (ParamStore, GeneratorParams, Graph) {
        let mut store = ParamStore::new();
        let params = GeneratorParams::register(&mut store, "gen", d_x, 6, d_z, d_z, d_x, 0.0);
        store.seeded_init(seed, "glorot").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < 0.4 {
                    edges.push((i, j));
                }
            }
        }
        let features = Array2::from_shape_fn((n, d_x), |_| rng.gen_range(-1.0..1.0));
        let g = Graph::new(n, edges, features, None).unwrap();
        (store, params, g)
    }

    #[test]
    fn deterministic_encode_returns_mu() {
        let (store, params, g) = setup(3, 4, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (latent, _) = encode(&store, &params, &g, false, false, &mut rng).unwrap();
        assert_eq!(latent.z, latent.mu);
        assert!(latent.noise.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn fixed_seed_reproduces_the_sample() {
        let (store, params, g) = setup(3, 4, 5, 2);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let (latent, _) = encode(&store, &params, &g, true, false, &mut rng).unwrap();
            latent.z
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reparameterization_identity_holds_bit_exactly() {
        let (store, params, g) = setup(3, 4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (latent, _) = encode(&store, &params, &g, true, false, &mut rng).unwrap();
        let rebuilt = &latent.mu + &(latent.log_sigma.mapv(f64::exp) * &latent.noise);
        assert_eq!(latent.z, rebuilt);
    }

    #[test]
    fn sample_mean_converges_to_mu() {
        // one node, unit sigma: mean of 1e5 draws within 4/sqrt(1e5) of mu
        let mut store = ParamStore::new();
        let params = GeneratorParams::register(&mut store, "gen", 2, 4, 2, 2, 2, 0.0);
        // zero weights leave mu = 0 and log_sigma = 0 (sigma = 1)
        let g = Graph::new(1, vec![], Array2::zeros((1, 2)), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reps = 100_000;
        let mut sums = [0.0f64; 2];
        for _ in 0..reps {
            let (latent, _) = encode(&store, &params, &g, true, false, &mut rng).unwrap();
            sums[0] += latent.z[(0, 0)];
            sums[1] += latent.z[(0, 1)];
        }
        let bound = 4.0 / (reps as f64).sqrt();
        for s in sums {
            assert!((s / reps as f64).abs() <= bound, "mean {} bound {bound}", s / reps as f64);
        }
    }

    #[test]
    fn decode_features_zero_params_gives_zero() {
        let mut store = ParamStore::new();
        let params = GeneratorParams::register(&mut store, "gen", 3, 4, 2, 2, 3, 0.0);
        let z = Array2::from_elem((4, 2), 1.25);
        let out = decode_features(&store, &params, &z);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_features_one_hot_selects_column() {
        let mut store = ParamStore::new();
        let params = GeneratorParams::register(&mut store, "gen", 3, 4, 2, 2, 3, 0.0);
        store.seeded_init(4, "glorot").unwrap();
        let mut z = Array2::zeros((1, 2));
        z[(0, 1)] = 1.0;
        let out = decode_features(&store, &params, &z);
        let w = store.value(&params.w_x);
        for c in 0..3 {
            assert!((out[(0, c)] - w[(1, c)]).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_features_hand_example() {
        // d_z = 2, W_x = [[1],[1]], b_x = [0.5], z = (1,2) -> 3.5
        let mut store = ParamStore::new();
        let params = GeneratorParams::register(&mut store, "gen", 1, 2, 2, 2, 1, 0.0);
        store.get_mut("gen.w_x").value.fill(1.0);
        store.get_mut("gen.b_x").value[(0, 0)] = 0.5;
        let z = ndarray::arr2(&[[1.0, 2.0]]);
        let out = decode_features(&store, &params, &z);
        assert!((out[(0, 0)] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_projections_give_half_weight() {
        let mut store = ParamStore::new();
        let params = GeneratorParams::register(&mut store, "gen", 2, 4, 2, 2, 2, 0.0);
        // W_e = I so f(z) = z; pick orthogonal latents
        store.get_mut("gen.w_e").value[(0, 0)] = 1.0;
        store.get_mut("gen.w_e").value[(1, 1)] = 1.0;
        let z = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let trace = decode_edges(&store, &params, &z);
        assert!((trace.edge_weight[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn equal_unit_projections_give_sigmoid_two() {
        let mut store = ParamStore::new();
        let params = GeneratorParams::register(&mut store, "gen", 2, 4, 2, 2, 2, 0.0);
        store.get_mut("gen.w_e").value[(0, 0)] = 1.0;
        store.get_mut("gen.w_e").value[(1, 1)] = 1.0;
        let z = ndarray::arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        let trace = decode_edges(&store, &params, &z);
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((trace.edge_weight[(0, 1)] - expect).abs() < 1e-12);
        assert!((trace.edge_weight[(0, 1)] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn generated_subgraph_invariants_hold() {
        for seed in 0..20 {
            let (store, params, g) = setup(3, 4, 7, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (sub, _, _) = generate(&store, &params, &g, true, false, &mut rng).unwrap();
            assert_eq!(sub.num_nodes, g.num_nodes);
            for i in 0..sub.num_nodes {
                for j in 0..sub.num_nodes {
                    let w = sub.edge_weight[(i, j)];
                    assert!(w > 0.0 && w < 1.0);
                    assert_eq!(w, sub.edge_weight[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn deterministic_generation_repeats() {
        let (store, params, g) = setup(3, 4, 5, 8);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (sub, _, _) = generate(&store, &params, &g, false, false, &mut rng).unwrap();
            (sub.gen_features, sub.edge_weight)
        };
        let (fa, ea) = run();
        let (fb, eb) = run();
        assert_eq!(fa, fb);
        assert_eq!(ea, eb);
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        for x in [-1e6, -745.0, -40.0, 0.0, 40.0, 745.0, 1e6] {
            let s = stable_sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn decoder_backward_matches_finite_differences() {
        let (mut store, params, g) = setup(3, 4, 6, 13);
        let ahat = normalized_adjacency(&g);
        let mut c_rng = ChaCha8Rng::seed_from_u64(99);
        let n = g.num_nodes;
        let cx = Array2::from_shape_fn((n, 3), |_| c_rng.gen_range(-1.0..1.0));
        let ce = Array2::from_shape_fn((n, n), |_| c_rng.gen_range(-1.0..1.0));

        // loss = <cx, Xhat> + <ce, E>, stochastic path frozen by seed
        let loss = |s: &ParamStore| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(555);
            let (latent, _) =
                encode_from_input(s, &params, &ahat, &g.features, true, false, &mut rng)?;
            let xhat = decode_features(s, &params, &latent.z);
            let edges = decode_edges(s, &params, &latent.z);
            Ok((&xhat * &cx).sum() + (&edges.edge_weight * &ce).sum())
        };

        store.zero_grads();
        let mut rng = ChaCha8Rng::seed_from_u64(555);
        let (latent, enc_trace) =
            encode_from_input(&store, &params, &ahat, &g.features, true, false, &mut rng).unwrap();
        let edge_trace = decode_edges(&store, &params, &latent.z);
        let mut d_z = decode_features_backward(&mut store, &params, &latent.z, &cx);
        d_z += &decode_edges_backward(&mut store, &params, &latent.z, &edge_trace, &ce);
        let d_mu = d_z.clone();
        let d_log_sigma = &d_z * &latent.log_sigma.mapv(f64::exp) * &latent.noise;
        encode_backward(
            &mut store, &params, &ahat, &enc_trace, &d_mu, &d_log_sigma, false,
        );

        let report = crate::gradcheck::fd_check(loss, &mut store, 48, 1e-5, 17).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
