//! Model assembly, parameter storage and the forward pass.
//!
//! Topology, in order: token embedding, the leading layer blocks, then for
//! parallel models a down-projection `d → d'`, the stacked parallel layers
//! and the closing layer blocks, and finally RMSNorm and an untied
//! `d × vocab` output projection.
//!
//! Parameter names:
//!
//! | tensor | name |
//! |---|---|
//! | token embedding | `embedding` |
//! | baseline block `i` | `blocks.{i}.attn.wq`, … |
//! | leading / closing blocks | `pre.{i}.*`, `post.{i}.*` |
//! | down-projection | `down_proj` |
//! | path `j` of parallel layer `l` | `parallel.{l}.path.{j}.*` |
//! | connection of layer `l` | `parallel.{l}.connection.{w,combine,router}` |
//! | final norm, output projection | `final_norm.scale`, `lm_head` |

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::blocks::{layer_block, BlockDims, BlockWeights, BLOCK_PARAM_NAMES};
use crate::config::{ConnectionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::parallel::{
    connection_shapes, down_projection, parallel_layer_forward, Connection, ConnectionRole, ForwardCtx,
    ParallelOutput, ParallelWeights, RoutingMode,
};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// Where a parameter tensor came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Fresh { init: String },
    Reused { path: usize, source: String },
    Concatenated { sources: Vec<String> },
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Fresh { .. } => "fresh",
            Provenance::Reused { .. } => "reused",
            Provenance::Concatenated { .. } => "concatenated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T: Float> {
    pub tensor: Tensor<T>,
    pub provenance: Provenance,
}

/// Named parameters in canonical order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, provenance: Provenance) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let (i, _) = self.entries.insert_full(name, Param { tensor, provenance });
        Ok(ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn provenance(&self, id: ParamId) -> &Provenance {
        &self.entries[id.0].provenance
    }

    pub fn set_provenance(&mut self, id: ParamId, p: Provenance) {
        self.entries[id.0].provenance = p;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), &mut v.tensor))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter on `g` as a trainable leaf, in store order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.values().map(|p| g.param(p.tensor.clone())).collect()
    }

    /// Gradient of each bound parameter (zeros where none reached it).
    pub fn gradients(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter()
            .zip(self.entries.values())
            .map(|(v, p)| match g.grad(*v) {
                Some(gr) => gr.to_vec(),
                None => vec![T::zero(); p.tensor.numel()],
            })
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            provenance: p.provenance.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Parameter layout of a full model, generic over the handle type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelWeights<H> {
    pub embedding: H,
    pub before: Vec<BlockWeights<H>>,
    pub down_proj: Option<H>,
    pub parallel: Vec<ParallelWeights<H>>,
    pub after: Vec<BlockWeights<H>>,
    pub final_norm: H,
    pub lm_head: H,
}

impl<H: Copy> ModelWeights<H> {
    pub fn map<U: Copy>(&self, mut f: impl FnMut(H) -> U) -> ModelWeights<U> {
        ModelWeights {
            embedding: f(self.embedding),
            before: self.before.iter().map(|b| b.map(&mut f)).collect(),
            down_proj: self.down_proj.map(&mut f),
            parallel: self.parallel.iter().map(|p| p.map(&mut f)).collect(),
            after: self.after.iter().map(|b| b.map(&mut f)).collect(),
            final_norm: f(self.final_norm),
            lm_head: f(self.lm_head),
        }
    }
}

/// Initialization policy of a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Ones,
}

impl Init {
    pub fn describe(&self) -> String {
        match self {
            Init::Normal(std) => format!("normal(0, {std})"),
            Init::Ones => "ones".into(),
        }
    }

    pub fn sample<T: Float>(&self, shape: &[usize], rng: &mut RngState) -> Tensor<T> {
        match self {
            Init::Normal(std) => rng.normal_tensor(shape, *std),
            Init::Ones => Tensor::ones(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Role of the connection after parallel layer `l`.
pub fn connection_role(config: &ModelConfig, l: usize) -> ConnectionRole {
    if l + 1 == config.n_parallel_layers {
        ConnectionRole::Final
    } else {
        ConnectionRole::Inter
    }
}

fn push_block(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, ff: usize, std: f64) {
    for (name, shape) in BLOCK_PARAM_NAMES.iter().zip(BlockWeights::<()>::shapes(width, ff)) {
        let init = if shape.len() == 1 { Init::Ones } else { Init::Normal(std) };
        out.push(ParamSpec {
            name: format!("{prefix}.{name}"),
            shape,
            init,
        });
    }
}

/// Every parameter of a model with this config, in canonical order.
pub fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let std = config.init_std;
    let d = config.d_model;
    let mut out = vec![ParamSpec {
        name: "embedding".into(),
        shape: vec![config.vocab_size, d],
        init: Init::Normal(std),
    }];
    if !config.is_parallel() {
        for i in 0..config.n_layer_blocks {
            push_block(&mut out, &format!("blocks.{i}"), d, config.ff_layer, std);
        }
    } else {
        let split = config.split();
        for i in 0..split.before {
            push_block(&mut out, &format!("pre.{i}"), d, config.ff_layer, std);
        }
        out.push(ParamSpec {
            name: "down_proj".into(),
            shape: vec![d, config.d_path],
            init: Init::Normal(std),
        });
        for l in 0..config.n_parallel_layers {
            for j in 0..config.k_paths {
                push_block(&mut out, &format!("parallel.{l}.path.{j}"), config.d_path, config.ff_path, std);
            }
            let role = connection_role(config, l);
            for (name, shape) in connection_shapes(config.connection, config.k_paths, config.d_path, d, role) {
                out.push(ParamSpec {
                    name: format!("parallel.{l}.connection.{name}"),
                    shape,
                    init: Init::Normal(std),
                });
            }
        }
        for i in 0..split.after {
            push_block(&mut out, &format!("post.{i}"), d, config.ff_layer, std);
        }
    }
    out.push(ParamSpec {
        name: "final_norm.scale".into(),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: "lm_head".into(),
        shape: vec![d, config.vocab_size],
        init: Init::Normal(std),
    });
    out
}

/// Closed-form parameter count of a config.
pub fn param_count(config: &ModelConfig) -> usize {
    layout(config).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Itemized count of a config without allocating its parameters.
pub fn param_report(config: &ModelConfig) -> ParamReport {
    ParamReport::from_shapes(layout(config).into_iter().map(|s| (s.name, s.shape)))
}

fn assemble(config: &ModelConfig, store_ids: &IndexMap<String, ParamId>) -> Result<ModelWeights<ParamId>> {
    let get = |name: &str| -> Result<ParamId> {
        store_ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    let block = |prefix: &str| -> Result<BlockWeights<ParamId>> {
        let mut ids = [ParamId(0); 9];
        for (slot, name) in ids.iter_mut().zip(BLOCK_PARAM_NAMES) {
            *slot = get(&format!("{prefix}.{name}"))?;
        }
        Ok(BlockWeights::from_array(ids))
    };
    let (before, down_proj, parallel, after) = if !config.is_parallel() {
        let blocks = (0..config.n_layer_blocks)
            .map(|i| block(&format!("blocks.{i}")))
            .collect::<Result<Vec<_>>>()?;
        (blocks, None, Vec::new(), Vec::new())
    } else {
        let split = config.split();
        let before = (0..split.before).map(|i| block(&format!("pre.{i}"))).collect::<Result<Vec<_>>>()?;
        let after = (0..split.after).map(|i| block(&format!("post.{i}"))).collect::<Result<Vec<_>>>()?;
        let mut parallel = Vec::new();
        for l in 0..config.n_parallel_layers {
            let paths = (0..config.k_paths)
                .map(|j| block(&format!("parallel.{l}.path.{j}")))
                .collect::<Result<Vec<_>>>()?;
            let c = |n: &str| get(&format!("parallel.{l}.connection.{n}"));
            let connection = match config.connection {
                ConnectionKind::ShareLinear => Connection::ShareLinear { w: c("w")? },
                ConnectionKind::GumbelV1 => Connection::GumbelV1 {
                    combine: c("combine")?,
                    router: c("router")?,
                },
                ConnectionKind::GumbelV2 => Connection::GumbelV2 {
                    router: c("router")?,
                    combine: c("combine")?,
                },
                ConnectionKind::None => unreachable!("checked by is_parallel"),
            };
            parallel.push(ParallelWeights { paths, connection });
        }
        (before, Some(get("down_proj")?), parallel, after)
    };
    Ok(ModelWeights {
        embedding: get("embedding")?,
        before,
        down_proj,
        parallel,
        after,
        final_norm: get("final_norm.scale")?,
        lm_head: get("lm_head")?,
    })
}

/// Everything a forward pass produced.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Final hidden state before the output norm.
    pub hidden: Var,
    pub layers: Vec<ParallelOutput>,
}

impl ForwardOutput {
    /// Soft routing weights of every routed layer.
    pub fn routing_pis(&self) -> Vec<Var> {
        self.layers.iter().filter_map(|l| l.routing.as_ref().map(|r| r.pi)).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub total: usize,
    /// Parameter counts per module, in topology order.
    pub groups: IndexMap<String, usize>,
    pub tensors: Vec<(String, Vec<usize>)>,
}

impl ParamReport {
    fn from_shapes(shapes: impl IntoIterator<Item = (String, Vec<usize>)>) -> Self {
        let mut groups: IndexMap<String, usize> = IndexMap::new();
        let mut tensors = Vec::new();
        let mut total = 0;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            *groups.entry(group_of(&name)).or_default() += n;
            total += n;
            tensors.push((name, shape));
        }
        ParamReport { total, groups, tensors }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (g, n) in &self.groups {
            s.push_str(&format!("{g:<32} {n:>12}\n"));
        }
        s.push_str(&format!("{:<32} {:>12} ({:.2}M)\n", "total", self.total, self.total as f64 / 1e6));
        s
    }
}

fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["parallel", l, "path", j, ..] => format!("parallel.{l}.path.{j}"),
        ["parallel", l, "connection", ..] => format!("parallel.{l}.connection"),
        [head @ ("blocks" | "pre" | "post"), i, ..] => format!("{head}.{i}"),
        [head, ..] => head.to_string(),
        [] => String::new(),
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub weights: ModelWeights<ParamId>,
}

impl<T: Float> Model<T> {
    /// Fresh model; initialization draws from `rng` in canonical order.
    pub fn build(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in layout(config) {
            let t = spec.init.sample(&spec.shape, rng);
            params.push(
                spec.name,
                t,
                Provenance::Fresh {
                    init: spec.init.describe(),
                },
            )?;
        }
        Self::from_store(config.clone(), params)
    }

    /// Wraps an existing store, checking names and shapes against the config.
    pub fn from_store(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this config, found {}",
                specs.len(),
                params.len()
            )));
        }
        let mut ids = IndexMap::new();
        for spec in &specs {
            let id = params
                .id(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            let got = params.tensor(id).shape();
            if got != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name, got, spec.shape
                )));
            }
            ids.insert(spec.name.clone(), id);
        }
        let weights = assemble(&config, &ids)?;
        Ok(Model { config, params, weights })
    }

    pub fn count_params(&self) -> ParamReport {
        ParamReport::from_shapes(
            self.params
                .iter()
                .map(|(name, p)| (name.to_string(), p.tensor.shape().to_vec())),
        )
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            weights: self.weights.clone(),
        }
    }

    /// Forward over row-stacked sequences; `vars` come from [`ParamStore::bind`].
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        tokens: &[u32],
        layout: SeqLayout,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract("parameter bindings do not match the model".into()));
        }
        forward_with(&self.config, &self.weights, g, vars, tokens, layout, ctx)
    }

    /// Evaluation forward of one sequence, returning logits and each routed
    /// layer's soft routing weights.
    pub fn eval_logits(&self, tokens: &[u32], routing: Option<RoutingMode>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut rng = RngState::derived(0, "eval");
        let mut ctx = eval_ctx(&self.config, &mut rng);
        if let Some(r) = routing {
            ctx.routing = r;
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let out = self.forward(&mut g, &vars, tokens, SeqLayout::single(tokens.len()), &mut ctx)?;
        let pis = out.routing_pis().iter().map(|v| g.value(*v).clone()).collect();
        Ok((g.value(out.logits).clone(), pis))
    }
}

fn layer_dims(c: &ModelConfig) -> BlockDims {
    BlockDims {
        width: c.d_model,
        heads: c.heads_layer,
        ff: c.ff_layer,
        eps: c.norm_eps,
        rope_base: c.rope_base,
        max_seq_len: c.max_seq_len,
    }
}

fn path_dims(c: &ModelConfig) -> BlockDims {
    BlockDims {
        width: c.d_path,
        heads: c.heads_path,
        ff: c.ff_path,
        eps: c.norm_eps,
        rope_base: c.rope_base,
        max_seq_len: c.max_seq_len,
    }
}

/// Forward pass given the parameter layout and bound variables, at any
/// precision.
pub fn forward_with<T: Float>(
    config: &ModelConfig,
    weights: &ModelWeights<ParamId>,
    g: &mut Graph<T>,
    vars: &[Var],
    tokens: &[u32],
    layout: SeqLayout,
    ctx: &mut ForwardCtx<'_>,
) -> Result<ForwardOutput> {
    if tokens.len() != layout.rows() || tokens.is_empty() {
        return Err(Error::Input(format!(
            "{} tokens do not fill a {}×{} batch",
            tokens.len(),
            layout.batch,
            layout.seq
        )));
    }
    if layout.seq > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            layout.seq, config.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    let w = weights.map(|id| vars[id.0]);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = g.embedding(w.embedding, &ids)?;
    let ld = layer_dims(config);
    for b in &w.before {
        x = layer_block(g, x, b, &ld, layout, None)?;
    }
    let mut layers = Vec::new();
    if let Some(down) = w.down_proj {
        x = down_projection(g, x, down)?;
        let pd = path_dims(config);
        for (l, pw) in w.parallel.iter().enumerate() {
            let out = parallel_layer_forward(g, x, pw, &pd, layout, connection_role(config, l), ctx)?;
            x = out.output;
            layers.push(out);
        }
    }
    for b in &w.after {
        x = layer_block(g, x, b, &ld, layout, None)?;
    }
    let normed = g.rmsnorm(x, w.final_norm, config.norm_eps)?;
    let logits = g.matmul(normed, w.lm_head)?;
    Ok(ForwardOutput {
        logits,
        hidden: x,
        layers,
    })
}

/// Context for evaluation: deterministic routing (unless disabled) and no dropout.
pub fn eval_ctx<'a>(config: &ModelConfig, rng: &'a mut RngState) -> ForwardCtx<'a> {
    ForwardCtx {
        routing: if config.gumbel.eval_deterministic {
            RoutingMode::Deterministic
        } else {
            RoutingMode::Sample
        },
        tau: config.gumbel.tau,
        hard: config.gumbel.hard,
        dropout_path: 0.0,
        rng,
    }
}

/// Context for a training forward at optimizer step `step`.
pub fn train_ctx<'a>(config: &ModelConfig, step: usize, rng: &'a mut RngState) -> ForwardCtx<'a> {
    ForwardCtx {
        routing: RoutingMode::Sample,
        tau: config.gumbel.tau_at(step),
        hard: config.gumbel.hard,
        dropout_path: config.dropout_path,
        rng,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets;

    fn tiny(kind: ConnectionKind) -> ModelConfig {
        let mut c = presets::desk_parallel(kind).with_vocab(40);
        c.max_seq_len = 16;
        if kind == ConnectionKind::None {
            c = presets::desk_base().with_vocab(40);
            c.n_layer_blocks = 2;
            c.max_seq_len = 16;
        }
        c
    }

    #[test]
    fn closed_form_matches_built_count() {
        for kind in [
            ConnectionKind::None,
            ConnectionKind::ShareLinear,
            ConnectionKind::GumbelV1,
            ConnectionKind::GumbelV2,
        ] {
            let c = tiny(kind);
            let m = Model::<f32>::build(&c, &mut RngState::new(1)).unwrap();
            let r = m.count_params();
            assert_eq!(r.total, param_count(&c));
            assert_eq!(r.groups.values().sum::<usize>(), r.total);
        }
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let c = tiny(ConnectionKind::GumbelV2);
        let a = Model::<f32>::build(&c, &mut RngState::new(7)).unwrap();
        let b = Model::<f32>::build(&c, &mut RngState::new(7)).unwrap();
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            assert!(p.tensor.same_values(&q.tensor));
        }
    }

    #[test]
    fn logits_shape_and_causality() {
        for kind in [ConnectionKind::None, ConnectionKind::ShareLinear, ConnectionKind::GumbelV1] {
            let c = tiny(kind);
            let m = Model::<f64>::build(&c, &mut RngState::new(3)).unwrap();
            let toks: Vec<u32> = (0..8).map(|i| (i * 7 % 40) as u32).collect();
            let (a, pis) = m.eval_logits(&toks, None).unwrap();
            assert_eq!(a.shape(), &[8, 40]);
            assert_eq!(pis.len(), if kind.is_gumbel() { 3 } else { 0 });
            let mut edited = toks.clone();
            edited[6] = 1;
            edited[7] = 2;
            let (b, _) = m.eval_logits(&edited, None).unwrap();
            for r in 0..6 {
                for (x, y) in a.row(r).iter().zip(b.row(r)) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let c = tiny(ConnectionKind::None);
        let m = Model::<f32>::build(&c, &mut RngState::new(3)).unwrap();
        assert!(matches!(m.eval_logits(&[1, 40], None), Err(Error::Input(_))));
    }

    #[test]
    fn groups_follow_topology() {
        let m = Model::<f32>::build(&tiny(ConnectionKind::GumbelV1), &mut RngState::new(0)).unwrap();
        let report = m.count_params();
        let keys: Vec<&str> = report.groups.keys().map(|s| s.as_str()).collect();
        assert_eq!(keys[0], "embedding");
        assert_eq!(keys[1], "pre.0");
        assert_eq!(keys[2], "down_proj");
        assert_eq!(keys[3], "parallel.0.path.0");
        assert!(keys.contains(&"parallel.2.connection"));
        assert_eq!(*keys.last().unwrap(), "lm_head");
    }
}
