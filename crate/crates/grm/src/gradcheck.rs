//! Finite-difference gradient verification.
//!
//! Every analytic backward pass in this crate is checked against central
//! differences: `(loss(x+h) - loss(x-h)) / 2h` per probed coordinate, with
//! any stochastic sampling frozen by the caller (the loss closure must be
//! deterministic).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over probes of |analytic - numeric| / max(1e-8, |numeric|)
    pub max_rel_err: f64,
    pub probes: usize,
    /// Coordinate realizing the max: (param name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic gradients (already accumulated in `store.grad`) against
/// central differences of `loss_fn` at `probes` coordinates.
///
/// Probes are drawn reproducibly from `seed`. When the probe budget covers
/// the number of entries, every entry receives at least one probe before the
/// remainder is spread uniformly over all scalar coordinates.
pub fn fd_check<F>(
    loss_fn: F,
    store: &mut ParamStore,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    assert!(h > 0.0, "step size must be positive");
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let sizes: Vec<usize> = names.iter().map(|n| store.get(n).value.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 || probes == 0 {
        return Ok(FdReport {
            max_rel_err: 0.0,
            probes: 0,
            worst: None,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(usize, usize)> = Vec::with_capacity(probes);
    if probes >= names.len() {
        for (entry_idx, &len) in sizes.iter().enumerate() {
            coords.push((entry_idx, rng.gen_range(0..len)));
        }
    }
    while coords.len() < probes {
        let mut flat = rng.gen_range(0..total);
        let mut entry_idx = 0;
        while flat >= sizes[entry_idx] {
            flat -= sizes[entry_idx];
            entry_idx += 1;
        }
        coords.push((entry_idx, flat));
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        probes: coords.len(),
        worst: None,
    };
    for (entry_idx, flat) in coords {
        let name = &names[entry_idx];
        let analytic = grad_at(store, name, flat);
        let original = value_at(store, name, flat);

        set_value_at(store, name, flat, original + h);
        let plus = finite(loss_fn(store)?)?;
        set_value_at(store, name, flat, original - h);
        let minus = finite(loss_fn(store)?)?;
        set_value_at(store, name, flat, original);

        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name.clone(), flat, analytic, numeric));
        }
    }
    Ok(report)
}

fn finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteFdLoss)
    }
}

fn value_at(store: &ParamStore, name: &str, flat: usize) -> f64 {
    *store.get(name).value.iter().nth(flat).unwrap()
}

fn grad_at(store: &ParamStore, name: &str, flat: usize) -> f64 {
    *store.get(name).grad.iter().nth(flat).unwrap()
}

fn set_value_at(store: &mut ParamStore, name: &str, flat: usize, v: f64) {
    *store.get_mut(name).value.iter_mut().nth(flat).unwrap() = v;
}
