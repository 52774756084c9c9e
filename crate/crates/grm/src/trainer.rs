//! Training loop, evaluation, and the experiment drivers behind the CLI:
//! bias-ratio sweeps, ablations over the degenerate model variants, and the
//! complexity smoke test.
//!
//! A run is fully determined by its configuration: example order, dropout,
//! and reparameterization noise all derive from the config seed, so repeated
//! runs produce byte-identical reports. The drivers may execute independent
//! (method, ratio, seed) cells in parallel; results are merged in sorted
//! order, so parallelism never changes the output.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::DomainContext;
use crate::error::{Error, Result};
use crate::gcn::{classify, Classifier, ClassifyInput, Readout};
use crate::graph::{ego_network, DomainedDataset, Graph, Task};
use crate::losses::{
    erm_loss, generation_step, predict, total_loss, AblationMode, EncoderInputKind, GrmModel,
    LossBreakdown, LossConfig, ModelDims, StepExample,
};
use crate::metrics::{accuracy, macro_f1, roc_auc, MetricKind, MetricReport, SeedEval};
use crate::params::{adam_step, AdamConfig, ParamStore};
use crate::synth::{generate_mix_shift, generate_sp_motif, MixShiftConfig, MotifConfig};

/// Training method: the full model, its three degenerate variants, or the
/// ERM baseline (classifier on the raw computation graph).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grm,
    GrmNoReg,
    GrmNoInv,
    GrmNoVgae,
    Erm,
}

pub const ABLATION_METHODS: [Method; 4] =
    [Method::Grm, Method::GrmNoReg, Method::GrmNoInv, Method::GrmNoVgae];

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Grm => "GRM",
            Method::GrmNoReg => "GRM\\R",
            Method::GrmNoInv => "GRM\\I",
            Method::GrmNoVgae => "GRM\\V",
            Method::Erm => "ERM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "GRM" => Ok(Method::Grm),
            "GRM\\R" | "GRM/R" => Ok(Method::GrmNoReg),
            "GRM\\I" | "GRM/I" => Ok(Method::GrmNoInv),
            "GRM\\V" | "GRM/V" => Ok(Method::GrmNoVgae),
            "ERM" => Ok(Method::Erm),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected GRM, GRM\\R, GRM\\I, GRM\\V, or ERM)"
            ))),
        }
    }

    fn ablation(&self) -> Option<AblationMode> {
        match self {
            Method::Grm => Some(AblationMode::Full),
            Method::GrmNoReg => Some(AblationMode::NoReg),
            Method::GrmNoInv => Some(AblationMode::NoInv),
            Method::GrmNoVgae => Some(AblationMode::NoVgae),
            Method::Erm => None,
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Method::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Where the dataset comes from: a bundle file or an inline synth config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Path(PathBuf),
    Mix(MixShiftConfig),
    Motif(MotifConfig),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Mix(MixShiftConfig::default())
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<DomainedDataset> {
    match source {
        DatasetSource::Path(p) => crate::bundle::read_bundle(p),
        DatasetSource::Mix(cfg) => generate_mix_shift(cfg),
        DatasetSource::Motif(cfg) => generate_sp_motif(cfg),
    }
}

/// Full experiment configuration; the JSON config file mirrors these fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub hidden: usize,
    pub d_z: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub hops: usize,
    pub l_star: f64,
    pub p_star: f64,
    pub epochs: usize,
    pub eval_repeats: usize,
    pub seed: u64,
    pub encoder_input: EncoderInputKind,
    pub metric: MetricKind,
    /// When nonzero, score the validation domains every this many epochs and
    /// keep the best-scoring parameters instead of the final ones.
    pub validate_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            method: Method::Grm,
            alpha: 1.0,
            beta: 1.0,
            theta: 0.5,
            hidden: 128,
            d_z: 128,
            adam: AdamConfig::default(),
            dropout: 0.3,
            hops: 2,
            l_star: 3.0,
            p_star: 1.5,
            epochs: 50,
            eval_repeats: 5,
            seed: 0,
            encoder_input: EncoderInputKind::FeaturesOnly,
            metric: MetricKind::Accuracy,
            validate_every: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.loss_config().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.eval_repeats < 1 {
            return Err(Error::Config("eval_repeats must be >= 1".into()));
        }
        if self.epochs == 0 || self.hidden == 0 || self.d_z == 0 {
            return Err(Error::Config("epochs, hidden, and d_z must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            theta: self.theta,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(&path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&raw).map_err(|source| Error::BundleParse {
                path: path.as_ref().display().to_string(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A trained parameter store plus the model structure it instantiates.
pub struct TrainedModel {
    pub store: ParamStore,
    pub kind: ModelKind,
}

pub enum ModelKind {
    Grm(GrmModel),
    Erm(Classifier),
}

fn readout_for(task: Task) -> Readout {
    match task {
        Task::NodeLevel => Readout::CenterNode,
        Task::GraphLevel => Readout::MeanPool,
    }
}

/// Register and initialize the model for a config and dataset shape.
pub fn build_model(
    cfg: &ExperimentConfig,
    d_x: usize,
    num_classes: usize,
    task: Task,
) -> Result<(ParamStore, ModelKind)> {
    let mut store = ParamStore::new();
    let readout = readout_for(task);
    let kind = match cfg.method {
        Method::Erm => ModelKind::Erm(Classifier::register(
            &mut store,
            "clf",
            &[d_x, cfg.hidden, cfg.hidden],
            num_classes,
            readout,
            cfg.dropout,
        )),
        _ => ModelKind::Grm(GrmModel::register(
            &mut store,
            ModelDims {
                d_x,
                hidden: cfg.hidden,
                d_z: cfg.d_z,
                num_classes,
                dropout: cfg.dropout,
            },
            readout,
            cfg.encoder_input,
        )),
    };
    store.seeded_init(cfg.seed, "glorot")?;
    Ok((store, kind))
}

/// One training example with its computation graph and cached domain context.
pub struct PreparedExample {
    pub graph: Arc<Graph>,
    pub node_map: Arc<Vec<usize>>,
    pub center: Option<usize>,
    pub label: usize,
    pub domain_id: i64,
    pub domain_ctx: Arc<DomainContext>,
}

impl PreparedExample {
    pub fn step<'a>(&'a self) -> StepExample<'a> {
        StepExample {
            graph: &self.graph,
            center: self.center,
            label: self.label,
            node_map: &self.node_map,
            domain_ctx: &self.domain_ctx,
        }
    }
}

/// An example readied for deterministic prediction: its computation graph
/// and, when the encoder input needs it, the domain context.
pub struct EvalExample {
    pub graph: Arc<Graph>,
    pub node_map: Arc<Vec<usize>>,
    pub center: Option<usize>,
    pub label: usize,
    pub domain_id: i64,
    pub domain_ctx: Option<Arc<DomainContext>>,
}

/// Training examples with ego networks extracted and domain contexts built,
/// shareable across methods and seeds (contexts depend on topology and
/// thresholds only). Validation examples are kept for checkpoint selection.
pub struct PreparedDataset {
    pub train: Vec<PreparedExample>,
    pub valid: Vec<EvalExample>,
    pub num_classes: usize,
    pub d_x: usize,
    pub task: Task,
}

impl PreparedDataset {
    pub fn build(ds: &DomainedDataset, cfg: &ExperimentConfig) -> Result<Self> {
        ds.validate()?;
        let needs_eval_ctx = cfg.method != Method::Erm
            && cfg.encoder_input == EncoderInputKind::ConcatDomain;
        let mut contexts: HashMap<usize, Arc<DomainContext>> = HashMap::new();
        let mut ctx_for = |graph: &Arc<Graph>, l_star: f64, p_star: f64| {
            contexts
                .entry(Arc::as_ptr(graph) as usize)
                .or_insert_with(|| Arc::new(DomainContext::build(graph, l_star, p_star)))
                .clone()
        };
        let mut train = Vec::new();
        let mut d_x = 0;
        for (_, ex) in ds.examples_in(&ds.train_domains) {
            d_x = ex.graph.feature_dim();
            let ctx = ctx_for(&ex.graph, cfg.l_star, cfg.p_star);
            let (graph, map, center) = prepare_computation_graph(ex, ds.task, cfg.hops)?;
            train.push(PreparedExample {
                graph,
                node_map: map,
                center,
                label: ex.label,
                domain_id: ex.domain_id,
                domain_ctx: ctx,
            });
        }
        if train.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let mut valid = Vec::new();
        for (_, ex) in ds.examples_in(&ds.valid_domains) {
            let ctx = needs_eval_ctx.then(|| ctx_for(&ex.graph, cfg.l_star, cfg.p_star));
            let (graph, map, center) = prepare_computation_graph(ex, ds.task, cfg.hops)?;
            valid.push(EvalExample {
                graph,
                node_map: map,
                center,
                label: ex.label,
                domain_id: ex.domain_id,
                domain_ctx: ctx,
            });
        }
        Ok(PreparedDataset {
            train,
            valid,
            num_classes: ds.num_classes,
            d_x,
            task: ds.task,
        })
    }
}

fn prepare_computation_graph(
    ex: &crate::graph::DomainedExample,
    task: Task,
    hops: usize,
) -> Result<(Arc<Graph>, Arc<Vec<usize>>, Option<usize>)> {
    match task {
        Task::NodeLevel => {
            let center = ex.center_node.ok_or(Error::MissingCenter)?;
            let (ego, map) = ego_network(&ex.graph, center, hops);
            Ok((Arc::new(ego), Arc::new(map), Some(0)))
        }
        Task::GraphLevel => {
            let map: Vec<usize> = (0..ex.graph.num_nodes).collect();
            Ok((Arc::clone(&ex.graph), Arc::new(map), None))
        }
    }
}

/// One row of the per-step training log.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub l_s: f64,
    pub l_r: f64,
    pub l_d: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub trained: TrainedModel,
    pub log: Vec<LogRow>,
    /// Mean raw losses over the final epoch.
    pub final_epoch_means: (f64, f64, f64),
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(a.wrapping_mul(0xd1342543de82ef95))
        .wrapping_add(b.wrapping_mul(0x2545f4914f6cdd1d));
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    x
}

/// Train on the prepared examples. Per-example updates, deterministic
/// per-epoch shuffling, abort with a named term on a non-finite loss.
///
/// With `validate_every` > 0 and a non-empty validation split, the returned
/// parameters are the ones that scored best on the validation domains
/// (ties keep the earlier checkpoint), not necessarily the final ones.
pub fn train_prepared(cfg: &ExperimentConfig, prep: &PreparedDataset) -> Result<TrainOutput> {
    cfg.validate()?;
    let (mut store, kind) = build_model(cfg, prep.d_x, prep.num_classes, prep.task)?;
    let loss_cfg = cfg.loss_config();
    let mut log = Vec::with_capacity(cfg.epochs * prep.train.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5f, 0));
    let mut order: Vec<usize> = (0..prep.train.len()).collect();
    let mut step = 0usize;
    let mut final_sums = (0.0, 0.0, 0.0);
    let select = cfg.validate_every > 0 && !prep.valid.is_empty();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        if epoch + 1 == cfg.epochs {
            final_sums = (0.0, 0.0, 0.0);
        }
        for &idx in &order {
            let ex = prep.train[idx].step();
            let step_seed = mix_seed(cfg.seed, epoch as u64 + 1, idx as u64);
            let breakdown = match (&kind, cfg.method.ablation()) {
                (ModelKind::Grm(model), Some(mode)) => {
                    total_loss(&mut store, model, &ex, &loss_cfg, mode, true, step_seed)?
                }
                (ModelKind::Erm(clf), _) => {
                    erm_loss(&mut store, clf, &ex, true, step_seed, true)?
                }
                _ => unreachable!("model kind always matches the method"),
            };
            check_finite(&breakdown, step)?;
            adam_step(&mut store, &cfg.adam)?;
            store.zero_grads();
            log.push(LogRow {
                step,
                l_s: breakdown.l_s,
                l_r: breakdown.l_r,
                l_d: breakdown.l_d,
                total: breakdown.total,
            });
            final_sums.0 += breakdown.l_s;
            final_sums.1 += breakdown.l_r;
            final_sums.2 += breakdown.l_d;
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if select && ((epoch + 1) % cfg.validate_every == 0 || last) {
            let score = score_validation(&store, &kind, &prep.valid)?;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, store.clone()));
            }
        }
    }
    if let Some((_, chosen)) = best {
        store = chosen;
    }
    let n = prep.train.len() as f64;
    Ok(TrainOutput {
        trained: TrainedModel { store, kind },
        log,
        final_epoch_means: (final_sums.0 / n, final_sums.1 / n, final_sums.2 / n),
    })
}

/// Build the dataset, prepare it, and train.
pub fn train(cfg: &ExperimentConfig, ds: &DomainedDataset) -> Result<TrainOutput> {
    let prep = PreparedDataset::build(ds, cfg)?;
    train_prepared(cfg, &prep)
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (term, value) in [
        ("L_s", b.l_s),
        ("L_r", b.l_r),
        ("L_d", b.l_d),
        ("total", b.total),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value, step });
        }
    }
    Ok(())
}

/// Deterministic prediction for one example (dropout off, z = mu).
fn predict_example(
    store: &ParamStore,
    kind: &ModelKind,
    graph: &Graph,
    center: Option<usize>,
    domain: Option<(&[usize], &DomainContext)>,
) -> Result<Vec<f64>> {
    match kind {
        ModelKind::Erm(clf) => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Ok(classify(
                store,
                clf,
                ClassifyInput::Graph(graph),
                center,
                false,
                &mut rng,
            )?
            .probs)
        }
        ModelKind::Grm(model) => predict(store, model, graph, center, domain, false, 0),
    }
}

/// Pooled accuracy over the validation examples; used for checkpoint
/// selection only.
fn score_validation(store: &ParamStore, kind: &ModelKind, valid: &[EvalExample]) -> Result<f64> {
    let mut hits = 0usize;
    for ex in valid {
        let domain = ex
            .domain_ctx
            .as_ref()
            .map(|c| (ex.node_map.as_slice(), c.as_ref()));
        let probs = predict_example(store, kind, &ex.graph, ex.center, domain)?;
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        hits += usize::from(pred == ex.label);
    }
    Ok(hits as f64 / valid.len() as f64)
}

/// Evaluate a trained model on the dataset's test domains.
///
/// Deterministic: dropout off and z = mu everywhere. Node-level examples are
/// classified on their ego networks, exactly as in training.
pub fn evaluate(
    trained: &TrainedModel,
    ds: &DomainedDataset,
    cfg: &ExperimentConfig,
    seed_label: u64,
) -> Result<SeedEval> {
    if cfg.metric == MetricKind::RocAuc && ds.num_classes != 2 {
        return Err(Error::MetricTaskMismatch {
            metric: "roc_auc".into(),
            reason: format!("dataset has {} classes", ds.num_classes),
        });
    }
    let needs_ctx = matches!(
        &trained.kind,
        ModelKind::Grm(m) if m.encoder_input == EncoderInputKind::ConcatDomain
    );
    let mut contexts: HashMap<usize, Arc<DomainContext>> = HashMap::new();
    let mut domains: Vec<i64> = ds.test_domains.clone();
    domains.sort_unstable();

    let mut per_domain = Vec::with_capacity(domains.len());
    for &domain in &domains {
        let mut truth = Vec::new();
        let mut preds = Vec::new();
        let mut scores = Vec::new();
        for (_, ex) in ds.examples_in(&[domain]) {
            let ctx = if needs_ctx {
                let key = Arc::as_ptr(&ex.graph) as usize;
                Some(
                    contexts
                        .entry(key)
                        .or_insert_with(|| {
                            Arc::new(DomainContext::build(&ex.graph, cfg.l_star, cfg.p_star))
                        })
                        .clone(),
                )
            } else {
                None
            };
            let probs = match ds.task {
                Task::NodeLevel => {
                    let center = ex.center_node.ok_or(Error::MissingCenter)?;
                    let (ego, map) = ego_network(&ex.graph, center, cfg.hops);
                    predict_example(
                        &trained.store,
                        &trained.kind,
                        &ego,
                        Some(0),
                        ctx.as_ref().map(|c| (map.as_slice(), c.as_ref())),
                    )?
                }
                Task::GraphLevel => {
                    let map: Vec<usize> = (0..ex.graph.num_nodes).collect();
                    predict_example(
                        &trained.store,
                        &trained.kind,
                        &ex.graph,
                        None,
                        ctx.as_ref().map(|c| (map.as_slice(), c.as_ref())),
                    )?
                }
            };
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            truth.push(ex.label);
            preds.push(pred);
            scores.push(probs.get(1).copied().unwrap_or(0.0));
        }
        let value = match cfg.metric {
            MetricKind::Accuracy => accuracy(&truth, &preds),
            MetricKind::MacroF1 => macro_f1(&truth, &preds, ds.num_classes),
            MetricKind::RocAuc => roc_auc(&truth, &scores)?,
        };
        per_domain.push((domain, value));
    }
    Ok(SeedEval::new(seed_label, per_domain))
}

/// Train and evaluate `eval_repeats` times with derived seeds and aggregate.
/// Each repeat's seed is `cfg.seed + k`, so a repeat's result is independent
/// of how many repeats run.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    ds: &DomainedDataset,
    prep: &PreparedDataset,
) -> Result<MetricReport> {
    let seeds: Vec<u64> = (0..cfg.eval_repeats as u64).map(|k| cfg.seed + k).collect();
    let evals: Vec<Result<SeedEval>> = seeds
        .par_iter()
        .map(|&seed| {
            let run_cfg = ExperimentConfig {
                seed,
                ..cfg.clone()
            };
            let out = train_prepared(&run_cfg, prep)?;
            evaluate(&out.trained, ds, &run_cfg, seed)
        })
        .collect();
    let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::aggregate(cfg.metric, evals))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let ds = load_dataset(&cfg.dataset)?;
    let prep = PreparedDataset::build(&ds, cfg)?;
    run_experiment_on(cfg, &ds, &prep)
}

/// One cell of the bias-ratio sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub ratio: f64,
    pub method: Method,
    pub seed: u64,
    pub min: f64,
    pub avg: f64,
}

/// Regenerate the mixing benchmark at each ratio (structure fixed by the
/// config seed, features varied), train every method at every seed, and
/// collect one row per (ratio, method, seed).
pub fn run_bias_sweep(
    base: &ExperimentConfig,
    ratios: &[f64],
    methods: &[Method],
) -> Result<Vec<SweepRow>> {
    let mix = match &base.dataset {
        DatasetSource::Mix(m) => m.clone(),
        _ => {
            return Err(Error::Config(
                "the bias sweep needs a mix dataset source".into(),
            ))
        }
    };
    let mut rows = Vec::new();
    for &ratio in ratios {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("ratio {ratio} outside [0, 1]")));
        }
        let ds = generate_mix_shift(&MixShiftConfig {
            bias_ratio: ratio,
            ..mix.clone()
        })?;
        let prep = PreparedDataset::build(&ds, base)?;
        let cells: Vec<(Method, u64)> = methods
            .iter()
            .flat_map(|&m| (0..base.eval_repeats as u64).map(move |k| (m, base.seed + k)))
            .collect();
        let cell_rows: Vec<Result<SweepRow>> = cells
            .par_iter()
            .map(|&(method, seed)| {
                let cfg = ExperimentConfig {
                    method,
                    seed,
                    ..base.clone()
                };
                let out = train_prepared(&cfg, &prep)?;
                let eval = evaluate(&out.trained, &ds, &cfg, seed)?;
                Ok(SweepRow {
                    ratio,
                    method,
                    seed,
                    min: eval.min,
                    avg: eval.avg,
                })
            })
            .collect();
        rows.extend(cell_rows.into_iter().collect::<Result<Vec<_>>>()?);
    }
    Ok(rows)
}

/// One cell of the ablation table, with the mean per-term contributions to
/// the training objective over the final epoch.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: Method,
    pub seed: u64,
    pub min: f64,
    pub avg: f64,
    pub mean_l_s: f64,
    pub mean_lr_contrib: f64,
    pub mean_ld_contrib: f64,
}

/// Train the full model and its three degenerate variants on one dataset
/// with shared seeds.
pub fn run_ablation(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let ds = load_dataset(&base.dataset)?;
    let prep = PreparedDataset::build(&ds, base)?;
    let cells: Vec<(Method, u64)> = ABLATION_METHODS
        .iter()
        .flat_map(|&m| (0..base.eval_repeats as u64).map(move |k| (m, base.seed + k)))
        .collect();
    let rows: Vec<Result<AblationRow>> = cells
        .par_iter()
        .map(|&(method, seed)| {
            let cfg = ExperimentConfig {
                method,
                seed,
                ..base.clone()
            };
            let out = train_prepared(&cfg, &prep)?;
            let eval = evaluate(&out.trained, &ds, &cfg, seed)?;
            let (l_s, l_r, l_d) = out.final_epoch_means;
            let mode = method.ablation().expect("ablation methods only");
            Ok(AblationRow {
                method,
                seed,
                min: eval.min,
                avg: eval.avg,
                mean_l_s: l_s,
                mean_lr_contrib: if mode == AblationMode::NoReg {
                    0.0
                } else {
                    cfg.alpha * l_r
                },
                mean_ld_contrib: if mode == AblationMode::NoInv {
                    0.0
                } else {
                    cfg.beta * l_d
                },
            })
        })
        .collect();
    rows.into_iter().collect()
}

/// Wall time of one generation+classification forward+backward per size.
#[derive(Debug, Clone, Copy)]
pub struct TimingRow {
    pub nodes: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub rows: Vec<TimingRow>,
    /// max over consecutive size-doubling pairs of t(2n)/t(n)
    pub max_doubling_ratio: f64,
}

/// Time one forward+backward of the generation and classification path on
/// dense random graphs of the given (ascending) sizes. Dense graphs make the
/// quadratic edge terms dominate, so doubling the node count should cost
/// roughly a factor of four; the report carries the worst observed ratio.
pub fn complexity_smoke(sizes: &[usize]) -> Result<ComplexityReport> {
    use rand::Rng;
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sizes must be strictly ascending".into()));
    }
    let d = 16;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < 0.5 {
                    edges.push((i, j));
                }
            }
        }
        let features =
            ndarray::Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let g = Graph::new(n, edges, features, None)?;
        let mut store = ParamStore::new();
        let model = GrmModel::register(
            &mut store,
            ModelDims {
                d_x: d,
                hidden: d,
                d_z: d,
                num_classes: 3,
                dropout: 0.3,
            },
            Readout::MeanPool,
            EncoderInputKind::FeaturesOnly,
        );
        store.seeded_init(7, "glorot")?;
        let loss_cfg = LossConfig::default();
        // warm-up pass, then the median of three timed passes
        generation_step(&mut store, &model, &g, None, 0, &loss_cfg, 1)?;
        store.zero_grads();
        let mut times = Vec::new();
        for rep in 0..3 {
            let start = std::time::Instant::now();
            generation_step(&mut store, &model, &g, None, 0, &loss_cfg, rep)?;
            times.push(start.elapsed().as_secs_f64());
            store.zero_grads();
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(TimingRow {
            nodes: n,
            seconds: times[1],
        });
    }
    let mut max_ratio: f64 = 0.0;
    for w in rows.windows(2) {
        if w[1].nodes == 2 * w[0].nodes {
            max_ratio = max_ratio.max(w[1].seconds / w[0].seconds);
        }
    }
    Ok(ComplexityReport {
        rows,
        max_doubling_ratio: max_ratio,
    })
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

/// Training log: one row per optimization step.
pub fn write_training_log(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,l_s,l_r,l_d,total")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.l_s, r.l_r, r.l_d, r.total
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Evaluation report: per-domain values then the min and avg rows.
pub fn write_eval_report(eval: &SeedEval, metric: MetricKind, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "domain,metric,value")?;
    for (domain, value) in &eval.per_domain {
        writeln!(out, "{},{},{:.6}", domain, metric.as_str(), value)?;
    }
    writeln!(out, "min,{},{:.6}", metric.as_str(), eval.min)?;
    writeln!(out, "avg,{},{:.6}", metric.as_str(), eval.avg)?;
    out.flush()?;
    Ok(())
}

pub fn write_sweep_report(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ratio,method,seed,min,avg")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.ratio,
            r.method.as_str(),
            r.seed,
            r.min,
            r.avg
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ablation_report(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "method,seed,min,avg,mean_l_s,mean_lr_contrib,mean_ld_contrib"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method.as_str(),
            r.seed,
            r.min,
            r.avg,
            r.mean_l_s,
            r.mean_lr_contrib,
            r.mean_ld_contrib
        )?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ExperimentConfig,
    d_x: usize,
    num_classes: usize,
    task: String,
    entries: serde_json::Value,
}

/// Save a trained model with everything needed to rebuild and evaluate it.
pub fn save_trained(
    trained: &TrainedModel,
    cfg: &ExperimentConfig,
    d_x: usize,
    num_classes: usize,
    task: Task,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = CheckpointFile {
        config: cfg.clone(),
        d_x,
        num_classes,
        task: task.as_str().to_string(),
        entries: crate::params::store_to_json(&trained.store),
    };
    let out = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(out), &file)?;
    Ok(())
}

/// Load a checkpoint and rebuild the model structure around it.
pub fn load_trained(path: impl AsRef<Path>) -> Result<(TrainedModel, ExperimentConfig)> {
    let raw = std::fs::read_to_string(&path)?;
    let file: CheckpointFile = serde_json::from_str(&raw)?;
    let task = Task::parse(&file.task)?;
    let (template, kind) = build_model(&file.config, file.d_x, file.num_classes, task)?;
    let store = crate::params::store_from_json(file.entries)?;
    let expected: Vec<&str> = template.names().collect();
    let got: Vec<&str> = store.names().collect();
    if expected != got {
        return Err(Error::Config(format!(
            "checkpoint parameters {got:?} do not match the config's model {expected:?}"
        )));
    }
    for (name, entry) in template.iter() {
        if entry.value.dim() != store.get(name).value.dim() {
            return Err(Error::Config(format!(
                "checkpoint entry '{name}' has the wrong shape"
            )));
        }
    }
    Ok((TrainedModel { store, kind }, file.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::sync::Arc;

    /// Tiny linearly separable node-level dataset: features are the label
    /// one-hot plus noise, graphs are sparse rings.
    fn separable_dataset(domains: usize, nodes: usize, seed: u64) -> DomainedDataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut examples = Vec::new();
        for d in 0..domains {
            let mut features = Array2::zeros((nodes, 2));
            let mut labels = Vec::new();
            for i in 0..nodes {
                let label = i % 2;
                labels.push(label);
                features[(i, label)] = 1.0;
                for j in 0..2 {
                    features[(i, j)] += 0.05 * rng.gen_range(-1.0..1.0);
                }
            }
            let edges: Vec<(usize, usize)> = (0..nodes).map(|i| (i, (i + 1) % nodes)).collect();
            let graph = Arc::new(Graph::new(nodes, edges, features, None).unwrap());
            for (i, &label) in labels.iter().enumerate() {
                examples.push(crate::graph::DomainedExample {
                    graph: Arc::clone(&graph),
                    label,
                    domain_id: d as i64,
                    center_node: Some(i),
                });
            }
        }
        DomainedDataset {
            examples,
            num_classes: 2,
            task: Task::NodeLevel,
            train_domains: vec![0],
            valid_domains: vec![1],
            test_domains: (2..domains as i64).collect(),
        }
    }

    fn small_cfg(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            hidden: 8,
            d_z: 8,
            epochs: 10,
            eval_repeats: 1,
            dropout: 0.1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn erm_fits_a_separable_dataset() {
        let ds = separable_dataset(3, 24, 1);
        let mut cfg = small_cfg(Method::Erm);
        cfg.epochs = 50;
        let out = train(&cfg, &ds).unwrap();
        // training accuracy on the train domain
        let mut cfg_eval = cfg.clone();
        cfg_eval.metric = MetricKind::Accuracy;
        let mut train_ds = ds.clone();
        train_ds.test_domains = vec![0];
        train_ds.train_domains = vec![];
        // move the train domain into "test" position for measurement only
        std::mem::swap(&mut train_ds.train_domains, &mut train_ds.valid_domains);
        let eval = evaluate(&out.trained, &train_ds, &cfg_eval, 0).unwrap();
        assert!(eval.avg > 0.95, "train accuracy {}", eval.avg);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable_dataset(3, 12, 2);
        let cfg = small_cfg(Method::Grm);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        for (name, entry) in a.trained.store.iter() {
            assert_eq!(entry.value, b.trained.store.get(name).value, "{name}");
        }
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.total, y.total);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_min_leq_avg() {
        let ds = separable_dataset(4, 12, 3);
        let cfg = small_cfg(Method::Grm);
        let out = train(&cfg, &ds).unwrap();
        let a = evaluate(&out.trained, &ds, &cfg, 0).unwrap();
        let b = evaluate(&out.trained, &ds, &cfg, 0).unwrap();
        assert_eq!(a.per_domain, b.per_domain);
        assert!(a.min <= a.avg);
    }

    #[test]
    fn all_methods_train_without_error() {
        let ds = separable_dataset(3, 10, 4);
        for method in [
            Method::Grm,
            Method::GrmNoReg,
            Method::GrmNoInv,
            Method::GrmNoVgae,
            Method::Erm,
        ] {
            let mut cfg = small_cfg(method);
            cfg.epochs = 2;
            let out = train(&cfg, &ds).unwrap();
            assert_eq!(out.log.len(), 2 * 10);
            if method == Method::GrmNoInv {
                // reported but excluded
                assert!(out.log.iter().all(|r| r.l_d >= 0.0));
                for r in &out.log {
                    assert!((r.total - (r.l_s + cfg.alpha * r.l_r)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn graph_level_training_runs() {
        let motif = MotifConfig {
            b: 0.5,
            num_graphs: 30,
            seed: 9,
        };
        let ds = generate_sp_motif(&motif).unwrap();
        let mut cfg = small_cfg(Method::Grm);
        cfg.epochs = 1;
        let out = train(&cfg, &ds).unwrap();
        let eval = evaluate(&out.trained, &ds, &cfg, 0).unwrap();
        assert_eq!(eval.per_domain.len(), 1);
    }

    #[test]
    fn seed_isolation_under_repeats() {
        let ds = separable_dataset(3, 10, 5);
        let mut cfg = small_cfg(Method::Erm);
        cfg.epochs = 3;
        cfg.eval_repeats = 1;
        let prep = PreparedDataset::build(&ds, &cfg).unwrap();
        let one = run_experiment_on(&cfg, &ds, &prep).unwrap();
        cfg.eval_repeats = 3;
        let three = run_experiment_on(&cfg, &ds, &prep).unwrap();
        assert_eq!(one.seeds[0].avg, three.seeds[0].avg);
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        let ds = separable_dataset(3, 12, 6);
        let cfg = small_cfg(Method::Grm);
        let out = train(&cfg, &ds).unwrap();
        let before = evaluate(&out.trained, &ds, &cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save_trained(&out.trained, &cfg, 2, 2, Task::NodeLevel, &path).unwrap();
        let (loaded, loaded_cfg) = load_trained(&path).unwrap();
        let after = evaluate(&loaded, &ds, &loaded_cfg, 0).unwrap();
        assert_eq!(before.per_domain, after.per_domain);
    }

    #[test]
    fn sweep_row_count_is_the_cartesian_product() {
        let mix = MixShiftConfig {
            num_domains: 3,
            nodes_per_domain: 16,
            num_classes: 2,
            feature_dim: 4,
            edge_prob: 0.1,
            ..Default::default()
        };
        let mut cfg = small_cfg(Method::Grm);
        cfg.dataset = DatasetSource::Mix(mix);
        cfg.epochs = 1;
        cfg.eval_repeats = 2;
        let rows = run_bias_sweep(&cfg, &[0.0, 1.0], &[Method::Grm, Method::Erm]).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
    }

    #[test]
    fn ablation_has_four_method_rows_per_seed() {
        let mix = MixShiftConfig {
            num_domains: 3,
            nodes_per_domain: 16,
            num_classes: 2,
            feature_dim: 4,
            edge_prob: 0.1,
            ..Default::default()
        };
        let mut cfg = small_cfg(Method::Grm);
        cfg.dataset = DatasetSource::Mix(mix);
        cfg.epochs = 1;
        cfg.eval_repeats = 1;
        let rows = run_ablation(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        let no_inv = rows
            .iter()
            .find(|r| r.method == Method::GrmNoInv)
            .unwrap();
        assert_eq!(no_inv.mean_ld_contrib, 0.0);
    }

    #[test]
    fn config_json_round_trips_and_rejects_unknown_fields() {
        let cfg = small_cfg(Method::GrmNoReg);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let bad = r#"{"methodd": "GRM"}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
    }
}
