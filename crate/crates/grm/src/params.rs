//! Trainable-parameter store with accumulated gradients, Adam state, and
//! seeded initialization. Everything is double precision; matrices are 2-D
//! and biases are stored as `1 x d` rows.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named trainable array with its gradient and optimizer state.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub adam_m: Array2<f64>,
    pub adam_v: Array2<f64>,
    pub step: u64,
}

impl ParamEntry {
    fn new(rows: usize, cols: usize) -> Self {
        ParamEntry {
            value: Array2::zeros((rows, cols)),
            grad: Array2::zeros((rows, cols)),
            adam_m: Array2::zeros((rows, cols)),
            adam_v: Array2::zeros((rows, cols)),
            step: 0,
        }
    }

    pub fn is_bias(&self) -> bool {
        self.value.nrows() == 1
    }
}

/// Named parameter map with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Adam hyperparameters. Weight decay is decoupled from the moment updates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.001,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declare a parameter of the given shape, initialized to zero.
    pub fn register(&mut self, name: &str, rows: usize, cols: usize) {
        assert!(
            self.entries
                .insert(name.to_string(), ParamEntry::new(rows, cols))
                .is_none(),
            "parameter '{name}' registered twice"
        );
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn value(&self, name: &str) -> &Array2<f64> {
        &self.get(name).value
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Array2<f64>) {
        let entry = self.get_mut(name);
        debug_assert_eq!(entry.grad.dim(), delta.dim(), "grad shape for '{name}'");
        entry.grad += delta;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Clear every gradient to exactly zero.
    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    /// Fill all values reproducibly from `seed` using the named scheme:
    /// `"glorot"` draws matrices uniformly in the fan-based Glorot range and
    /// zeros biases; `"zeros"` clears everything. Each entry gets its own
    /// stream derived from the seed and the entry name, so initialization is
    /// independent of registration order.
    pub fn seeded_init(&mut self, seed: u64, scheme: &str) -> Result<()> {
        match scheme {
            "glorot" => {
                for (name, entry) in self.entries.iter_mut() {
                    if entry.is_bias() {
                        entry.value.fill(0.0);
                        continue;
                    }
                    let (rows, cols) = entry.value.dim();
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
                    entry
                        .value
                        .mapv_inplace(|_| rng.gen_range(-bound..bound));
                }
                Ok(())
            }
            "zeros" => {
                for entry in self.entries.values_mut() {
                    entry.value.fill(0.0);
                }
                Ok(())
            }
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

/// Stable per-entry stream: FNV-1a over the name folded into the seed.
fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(h)
}

/// One Adam update with bias correction and decoupled weight decay.
/// Gradients must be populated and finite; the step counter advances even
/// when the gradient is zero.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    for (name, entry) in store.entries.iter_mut() {
        if entry.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        entry.step += 1;
        let t = entry.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for ((v, g), (m, s)) in entry
            .value
            .iter_mut()
            .zip(entry.grad.iter())
            .zip(entry.adam_m.iter_mut().zip(entry.adam_v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *s = cfg.beta2 * *s + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *s / bc2;
            *v -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)
                + cfg.learning_rate * cfg.weight_decay * *v;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
    step: u64,
}

/// Serialize entry names, shapes, values, and step counts. JSON floats are
/// written in shortest round-trip form, so reloading is value-exact.
pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let entries = checkpoint_entries(store);
    let out = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(out), &entries)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let raw = std::fs::read_to_string(path)?;
    let entries: Vec<CheckpointEntry> = serde_json::from_str(&raw)?;
    store_from_entries(entries)
}

fn checkpoint_entries(store: &ParamStore) -> Vec<CheckpointEntry> {
    store
        .iter()
        .map(|(name, e)| CheckpointEntry {
            name: name.to_string(),
            shape: [e.value.nrows(), e.value.ncols()],
            values: e.value.iter().copied().collect(),
            step: e.step,
        })
        .collect()
}

fn store_from_entries(entries: Vec<CheckpointEntry>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let value = Array2::from_shape_vec((e.shape[0], e.shape[1]), e.values)
            .map_err(|err| Error::Config(format!("checkpoint entry '{}': {err}", e.name)))?;
        store.register(&e.name, e.shape[0], e.shape[1]);
        let entry = store.get_mut(&e.name);
        entry.value = value;
        entry.step = e.step;
    }
    Ok(store)
}

pub(crate) fn store_to_json(store: &ParamStore) -> serde_json::Value {
    serde_json::to_value(checkpoint_entries(store)).expect("checkpoint serialization")
}

pub(crate) fn store_from_json(value: serde_json::Value) -> Result<ParamStore> {
    let entries: Vec<CheckpointEntry> = serde_json::from_value(value)?;
    store_from_entries(entries)
}
