//! Building a parallel model out of independently pretrained path models.
//!
//! Path `j`'s block `l` is copied verbatim into slot `j` of parallel layer
//! `l`. Embeddings are concatenated per token along the feature axis and the
//! output projections along their input axis, so path `j` owns features
//! `[j·d', (j+1)·d')` end to end. Everything else (leading and closing
//! blocks, down-projection, connections, final norm) is freshly initialized
//! with the same policy as [`Model::build`].

use indexmap::IndexMap;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{layout, Model, ParamStore, Provenance};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// Identity and config of one source path.
#[derive(Clone, Debug)]
pub struct PathSource {
    pub name: String,
    pub config: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct CompositionPlan {
    pub target: ModelConfig,
    pub paths: Vec<PathSource>,
    /// Provenance of every target parameter, in canonical order.
    pub mapping: IndexMap<String, Provenance>,
}

fn concat_sources(k: usize, name: &str) -> Vec<String> {
    (0..k).map(|j| format!("path{}:{name}", j + 1)).collect()
}

impl CompositionPlan {
    pub fn new(target: ModelConfig, paths: Vec<PathSource>) -> Self {
        let mut mapping = IndexMap::new();
        for spec in layout(&target) {
            let prov = match spec.name.as_str() {
                "embedding" | "lm_head" => Provenance::Concatenated {
                    sources: concat_sources(paths.len(), &spec.name),
                },
                name => match parse_path_param(name) {
                    Some((l, j, rest)) => Provenance::Reused {
                        path: j,
                        source: format!("blocks.{l}.{rest}"),
                    },
                    None => Provenance::Fresh {
                        init: spec.init.describe(),
                    },
                },
            };
            mapping.insert(spec.name, prov);
        }
        CompositionPlan { target, paths, mapping }
    }
}

/// `parallel.{l}.path.{j}.{rest}` → `(l, j, rest)`.
fn parse_path_param(name: &str) -> Option<(usize, usize, &str)> {
    let rest = name.strip_prefix("parallel.")?;
    let (l, rest) = rest.split_once('.')?;
    let rest = rest.strip_prefix("path.")?;
    let (j, rest) = rest.split_once('.')?;
    Some((l.parse().ok()?, j.parse().ok()?, rest))
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanReport {
    pub entries: Vec<(String, Provenance)>,
    pub conflicts: Vec<String>,
}

impl PlanReport {
    pub fn is_ok(&self) -> bool {
        self.conflicts.is_empty()
    }
}

/// Lists the mapping and every structural conflict, without touching weights.
pub fn validate_plan(plan: &CompositionPlan) -> PlanReport {
    let t = &plan.target;
    let mut conflicts = Vec::new();
    if let Err(e) = t.validate() {
        conflicts.push(format!("target config: {e}"));
    }
    if !t.is_parallel() {
        conflicts.push("target has no parallel layers".into());
    }
    if plan.paths.len() != t.k_paths {
        conflicts.push(format!(
            "target expects k_paths = {} sources, plan has {}",
            t.k_paths,
            plan.paths.len()
        ));
    }
    let width_sum: usize = plan.paths.iter().map(|p| p.config.d_model).sum();
    if width_sum != t.d_model {
        conflicts.push(format!("path widths sum to {width_sum}, target d_model is {}", t.d_model));
    }
    for (j, p) in plan.paths.iter().enumerate() {
        let c = &p.config;
        let who = format!("path{} ({})", j + 1, p.name);
        if c.is_parallel() {
            conflicts.push(format!("{who}: source must be a plain stacked model"));
        }
        if c.d_model != t.d_path {
            conflicts.push(format!("{who}: d_path {} ≠ target d_path {}", c.d_model, t.d_path));
        }
        if c.vocab_size != t.vocab_size {
            conflicts.push(format!("{who}: vocab_size {} ≠ target vocab_size {}", c.vocab_size, t.vocab_size));
        }
        if c.n_layer_blocks != t.n_parallel_layers {
            conflicts.push(format!(
                "{who}: {} layer blocks ≠ target n_parallel_layers {}",
                c.n_layer_blocks, t.n_parallel_layers
            ));
        }
        if c.heads_layer != t.heads_path {
            conflicts.push(format!("{who}: heads {} ≠ target heads_path {}", c.heads_layer, t.heads_path));
        }
        if c.ff_layer != t.ff_path {
            conflicts.push(format!("{who}: ff {} ≠ target ff_path {}", c.ff_layer, t.ff_path));
        }
        if c.head_dim != t.head_dim {
            conflicts.push(format!("{who}: head_dim {} ≠ target head_dim {}", c.head_dim, t.head_dim));
        }
    }
    PlanReport {
        entries: plan.mapping.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        conflicts,
    }
}

fn source<'a, T: Float>(m: &'a Model<T>, j: usize, name: &str) -> Result<&'a Tensor<T>> {
    m.params
        .get(name)
        .ok_or_else(|| Error::Composition(format!("path{} is missing parameter {name}", j + 1)))
}

/// Per-row concatenation of `[rows, w_j]` tensors into `[rows, Σ w_j]`.
fn concat_cols<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts[0].shape()[0];
    let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(&[rows, width], data)
}

/// Stacking of `[h_j, cols]` tensors into `[Σ h_j, cols]`.
fn concat_rows<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&[rows, cols], data)
}

pub fn compose<T: Float>(plan: &CompositionPlan, paths: &[&Model<T>], rng: &mut RngState) -> Result<Model<T>> {
    let report = validate_plan(plan);
    if !report.is_ok() {
        return Err(Error::Composition(report.conflicts.join("; ")));
    }
    if paths.len() != plan.paths.len() {
        return Err(Error::Composition(format!(
            "plan names {} paths, {} models given",
            plan.paths.len(),
            paths.len()
        )));
    }
    for (j, (m, src)) in paths.iter().zip(&plan.paths).enumerate() {
        if m.config != src.config {
            return Err(Error::Composition(format!("path{} model does not match its planned config", j + 1)));
        }
    }
    let mut store = ParamStore::new();
    for spec in layout(&plan.target) {
        let prov = plan.mapping.get(&spec.name).cloned().ok_or_else(|| {
            Error::Composition(format!("plan has no mapping for {}", spec.name))
        })?;
        let tensor = match &prov {
            Provenance::Fresh { .. } => spec.init.sample(&spec.shape, rng),
            Provenance::Reused { path, source: name } => source(paths[*path], *path, name)?.clone(),
            Provenance::Concatenated { .. } => {
                let parts = paths
                    .iter()
                    .enumerate()
                    .map(|(j, m)| source(m, j, &spec.name))
                    .collect::<Result<Vec<_>>>()?;
                match spec.name.as_str() {
                    "embedding" => concat_cols(&parts)?,
                    "lm_head" => concat_rows(&parts)?,
                    other => return Err(Error::Composition(format!("no concatenation rule for {other}"))),
                }
            }
        };
        if tensor.shape() != spec.shape.as_slice() {
            return Err(Error::Composition(format!(
                "{} would have shape {:?}, target needs {:?}",
                spec.name,
                tensor.shape(),
                spec.shape
            )));
        }
        store.push(spec.name, tensor, prov)?;
    }
    Model::from_store(plan.target.clone(), store)
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    name: &'a str,
    shape: &'a [usize],
    #[serde(flatten)]
    provenance: &'a Provenance,
}

/// JSON listing of every tensor with its provenance.
pub fn provenance_manifest<T: Float>(model: &Model<T>) -> String {
    let entries: Vec<ManifestEntry> = model
        .params
        .iter()
        .map(|(name, p)| ManifestEntry {
            name,
            shape: p.tensor.shape(),
            provenance: &p.provenance,
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("manifest serializes")
}
