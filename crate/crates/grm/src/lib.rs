//! Generative risk minimization on graphs.
//!
//! This crate implements a variational generator that maps each input graph
//! to an invariant subgraph with continuous edge weights, trains it with
//! three ELBO-derived losses (supervision, KL regularization, invariance to
//! domain context), and evaluates it against an ERM baseline on synthetic
//! distribution-shifted benchmarks.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`graph`]: graph types, ego networks, normalized propagation
//! - [`params`] / [`gradcheck`]: parameter store, Adam, finite-difference
//!   gradient verification
//! - [`gcn`]: GCN stacks and the classifier, with hand-derived backward passes
//! - [`generator`]: the variational invariant-subgraph generator
//! - [`domain`]: influential-node selection and domain-specific representations
//! - [`losses`]: the three losses and the combined objective
//! - [`synth`]: deterministic distribution-shift benchmark generators
//! - [`metrics`] / [`trainer`]: evaluation metrics, training loop, and the
//!   experiment drivers behind the `grm` CLI
//!
//! The `examples/` directory holds one runnable example per capability; see
//! the README for the tour.

pub mod bundle;
pub mod domain;
pub mod error;
pub mod gcn;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{DomainedDataset, DomainedExample, Graph, Task};
pub use params::{AdamConfig, ParamStore};
