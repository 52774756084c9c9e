//! Dataset bundle files: a strict JSON schema for [`DomainedDataset`].
//!
//! Top-level object: `num_classes`, `task`, `domains` (train/valid/test id
//! arrays), and `examples`, where each example carries `nodes`, `edges`
//! (`[u,v]` or `[u,v,w]`), `features` (row-major), `label`, `domain_id`, and
//! an optional `center_node`. Unknown fields are rejected.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{DomainedDataset, DomainedExample, Graph, Task};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    num_classes: usize,
    task: String,
    domains: DomainSplits,
    examples: Vec<ExampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSplits {
    train: Vec<i64>,
    valid: Vec<i64>,
    test: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    nodes: usize,
    edges: Vec<EdgeRecord>,
    features: Vec<Vec<f64>>,
    label: usize,
    domain_id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center_node: Option<usize>,
}

/// `[u, v]` for unit weight, `[u, v, w]` otherwise.
struct EdgeRecord {
    u: usize,
    v: usize,
    w: Option<f64>,
}

impl Serialize for EdgeRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let len = if self.w.is_some() { 3 } else { 2 };
        let mut seq = serializer.serialize_seq(Some(len))?;
        seq.serialize_element(&(self.u as u64))?;
        seq.serialize_element(&(self.v as u64))?;
        if let Some(w) = self.w {
            seq.serialize_element(&w)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for EdgeRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EdgeVisitor;

        impl<'de> Visitor<'de> for EdgeVisitor {
            type Value = EdgeRecord;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an edge [u, v] or [u, v, w]")
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<EdgeRecord, A::Error> {
                let u: u64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let v: u64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                let w: Option<f64> = seq.next_element()?;
                if seq.next_element::<serde_json::Value>()?.is_some() {
                    return Err(de::Error::custom("edge has more than 3 entries"));
                }
                Ok(EdgeRecord {
                    u: u as usize,
                    v: v as usize,
                    w,
                })
            }
        }

        deserializer.deserialize_seq(EdgeVisitor)
    }
}

fn example_to_record(ex: &DomainedExample) -> ExampleRecord {
    let g = &ex.graph;
    let edges = g
        .edges
        .iter()
        .enumerate()
        .map(|(idx, &(u, v))| EdgeRecord {
            u,
            v,
            w: g.edge_weights.as_ref().map(|w| w[idx]),
        })
        .collect();
    let features = g
        .features
        .rows()
        .into_iter()
        .map(|row| row.to_vec())
        .collect();
    ExampleRecord {
        nodes: g.num_nodes,
        edges,
        features,
        label: ex.label,
        domain_id: ex.domain_id,
        center_node: ex.center_node,
    }
}

fn record_to_example(
    rec: ExampleRecord,
    path: &str,
    idx: usize,
    // Node-level bundles repeat each domain graph once per labeled node;
    // share a single allocation per distinct graph.
    graph_pool: &mut HashMap<i64, Vec<Arc<Graph>>>,
) -> Result<DomainedExample> {
    let d_x = rec.features.first().map_or(0, |r| r.len());
    for (i, row) in rec.features.iter().enumerate() {
        if row.len() != d_x {
            return Err(Error::BundleInvalid {
                path: path.to_string(),
                reason: format!("example {idx}: feature row {i} has ragged width"),
            });
        }
    }
    let flat: Vec<f64> = rec.features.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((flat.len() / d_x.max(1), d_x), flat).map_err(|e| {
        Error::BundleInvalid {
            path: path.to_string(),
            reason: format!("example {idx}: {e}"),
        }
    })?;
    let any_weighted = rec.edges.iter().any(|e| e.w.is_some());
    let mut edges = Vec::with_capacity(rec.edges.len());
    let mut weights = Vec::with_capacity(rec.edges.len());
    for e in rec.edges {
        edges.push((e.u, e.v));
        weights.push(e.w.unwrap_or(1.0));
    }
    let graph = Graph::new(
        rec.nodes,
        edges,
        features,
        any_weighted.then_some(weights),
    )?;

    let pool = graph_pool.entry(rec.domain_id).or_default();
    let graph = match pool.iter().find(|g| ***g == graph) {
        Some(shared) => Arc::clone(shared),
        None => {
            let arc = Arc::new(graph);
            pool.push(Arc::clone(&arc));
            arc
        }
    };
    Ok(DomainedExample {
        graph,
        label: rec.label,
        domain_id: rec.domain_id,
        center_node: rec.center_node,
    })
}

/// Serialize a dataset to the bundle schema at `path`.
pub fn write_bundle(ds: &DomainedDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = BundleFile {
        num_classes: ds.num_classes,
        task: ds.task.as_str().to_string(),
        domains: DomainSplits {
            train: ds.train_domains.clone(),
            valid: ds.valid_domains.clone(),
            test: ds.test_domains.clone(),
        },
        examples: ds.examples.iter().map(example_to_record).collect(),
    };
    let out = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(out);
    serde_json::to_writer(&mut out, &file)?;
    use std::io::Write;
    out.flush()?;
    Ok(())
}

/// Parse a bundle file, rejecting unknown fields and validating the result.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<DomainedDataset> {
    let path_str = path.as_ref().display().to_string();
    let raw = std::fs::read_to_string(&path)?;
    let file: BundleFile = serde_json::from_str(&raw).map_err(|source| Error::BundleParse {
        path: path_str.clone(),
        source,
    })?;
    let task = Task::parse(&file.task)?;
    let mut pool = HashMap::new();
    let examples = file
        .examples
        .into_iter()
        .enumerate()
        .map(|(idx, rec)| record_to_example(rec, &path_str, idx, &mut pool))
        .collect::<Result<Vec<_>>>()?;
    let ds = DomainedDataset {
        examples,
        num_classes: file.num_classes,
        task,
        train_domains: file.domains.train,
        valid_domains: file.domains.valid,
        test_domains: file.domains.test,
    };
    ds.validate()?;
    Ok(ds)
}
