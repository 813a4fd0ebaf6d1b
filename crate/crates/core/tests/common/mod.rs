#![allow(dead_code)]

use parapath::blocks::{layer_block, BlockDims, BlockWeights};
use parapath::config::{presets, ConnectionKind, ModelConfig};
use parapath::gradcheck::{check_gradients, weighted_sum, GradCheckConfig, GradCheckReport, Objective};
use parapath::losses::{cross_entropy, entropy_loss, load_balance_loss, total_loss, LossConfig};
use parapath::model::{forward_with, Model, ModelWeights, ParamId};
use parapath::parallel::{gumbel_softmax, ForwardCtx, RoutingMode};
use parapath::{Float, Graph, Result, RngState, SeqLayout, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    Scale,
    ScaleRows,
    Matmul,
    Transpose,
    ConcatRows,
    ConcatCols,
    Slice,
    Split,
    Embedding,
    Sum,
    Mean,
    SumAxis0,
    SumAxis1,
    MeanAxis0,
    MeanAxis1,
    Sqrt,
    Log,
    Exp,
    Silu,
    Maximum,
    ClampMin,
    Softmax0,
    Softmax1,
    RmsNorm,
    Rope,
    Attention,
    CrossEntropy,
    Cosine,
    Dropout,
    GumbelSoftmax,
    LayerBlock,
    EntropyLoss,
    LoadLoss,
}

pub const PRIMS: &[Prim] = &[
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::Scale,
    Prim::ScaleRows,
    Prim::Matmul,
    Prim::Transpose,
    Prim::ConcatRows,
    Prim::ConcatCols,
    Prim::Slice,
    Prim::Split,
    Prim::Embedding,
    Prim::Sum,
    Prim::Mean,
    Prim::SumAxis0,
    Prim::SumAxis1,
    Prim::MeanAxis0,
    Prim::MeanAxis1,
    Prim::Sqrt,
    Prim::Log,
    Prim::Exp,
    Prim::Silu,
    Prim::Maximum,
    Prim::ClampMin,
    Prim::Softmax0,
    Prim::Softmax1,
    Prim::RmsNorm,
    Prim::Rope,
    Prim::Attention,
    Prim::CrossEntropy,
    Prim::Cosine,
    Prim::Dropout,
    Prim::GumbelSoftmax,
    Prim::LayerBlock,
    Prim::EntropyLoss,
    Prim::LoadLoss,
];

/// One random instance of a primitive: inputs in [-2, 2] (positive for
/// sqrt/log) plus the integer or frozen side data the op needs.
pub struct PrimCase {
    pub prim: Prim,
    pub inputs: Vec<Tensor<f64>>,
    pub ids: Vec<usize>,
    pub side: Vec<f64>,
    pub rows: usize,
    pub heads: usize,
    pub layout: SeqLayout,
    pub seed: u64,
}

fn dim(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

impl PrimCase {
    pub fn new(prim: Prim, seed: u64) -> Self {
        let mut rng = RngState::derived(seed, &format!("{prim:?}"));
        let r = dim(&mut rng, 1, 4);
        let c = dim(&mut rng, 2, 5);
        let mut u = |shape: &[usize], lo: f64, hi: f64| rng.uniform_tensor::<f64>(shape, lo, hi);
        let mut case = PrimCase {
            prim,
            inputs: Vec::new(),
            ids: Vec::new(),
            side: Vec::new(),
            rows: r,
            heads: 1,
            layout: SeqLayout::single(r),
            seed,
        };
        use Prim::*;
        case.inputs = match prim {
            Add | Sub | Mul | Maximum | Cosine => vec![u(&[r, c], -2.0, 2.0), u(&[r, c], -2.0, 2.0)],
            ScaleRows => vec![u(&[r, c], -2.0, 2.0), u(&[r, 1], -2.0, 2.0)],
            Matmul => {
                let k = 2 + (r + c) % 3;
                vec![u(&[r, k], -2.0, 2.0), u(&[k, c], -2.0, 2.0)]
            }
            ConcatRows => vec![u(&[r, c], -2.0, 2.0), u(&[r + 1, c], -2.0, 2.0)],
            ConcatCols => vec![u(&[r, c], -2.0, 2.0), u(&[r, c + 1], -2.0, 2.0)],
            Sqrt | Log => vec![u(&[r, c], 0.5, 2.0)],
            RmsNorm => vec![u(&[r, c], -2.0, 2.0), u(&[c], -2.0, 2.0)],
            Rope => {
                case.heads = 2;
                vec![u(&[r, 4 * c.min(3)], -2.0, 2.0)]
            }
            Attention => {
                case.heads = 2;
                case.layout = SeqLayout { batch: 2, seq: r + 1 };
                let n = case.layout.rows();
                vec![u(&[n, 4], -2.0, 2.0), u(&[n, 4], -2.0, 2.0), u(&[n, 4], -2.0, 2.0)]
            }
            Embedding => {
                let v = c + 2;
                let mut rr = RngState::new(seed);
                case.ids = (0..r + 2).map(|_| rr.below(v)).collect();
                vec![u(&[v, 3], -2.0, 2.0)]
            }
            CrossEntropy => {
                let mut rr = RngState::new(seed);
                case.ids = (0..r).map(|_| rr.below(c)).collect();
                vec![u(&[r, c], -2.0, 2.0)]
            }
            Dropout => {
                let mut rr = RngState::new(seed);
                case.side = (0..r * c).map(|_| if rr.uniform() < 0.3 { 0.0 } else { 1.0 / 0.7 }).collect();
                vec![u(&[r, c], -2.0, 2.0)]
            }
            GumbelSoftmax => {
                let mut rr = RngState::new(seed);
                let noise = rr.gumbel_noise::<f64>(&[r, 3]);
                case.side = noise.data().to_vec();
                case.side.push(0.5 + rr.uniform() * 1.5);
                vec![u(&[r, 3], -2.0, 2.0)]
            }
            EntropyLoss | LoadLoss => vec![u(&[r + 1, 3], -2.0, 2.0)],
            LayerBlock => {
                case.heads = 2;
                case.layout = SeqLayout { batch: 1, seq: r + 1 };
                let n = case.layout.rows();
                let mut v = vec![u(&[n, 4], -2.0, 2.0)];
                for shape in BlockWeights::<()>::shapes(4, 6) {
                    v.push(if shape.len() == 1 {
                        u(&shape, 0.5, 1.5)
                    } else {
                        u(&shape, -0.5, 0.5)
                    });
                }
                v
            }
            _ => vec![u(&[r, c], -2.0, 2.0)],
        };
        case
    }
}

impl Objective for PrimCase {
    fn eval<T: Float>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        use Prim::*;
        let out = match self.prim {
            Add => g.add(x[0], x[1])?,
            Sub => g.sub(x[0], x[1])?,
            Mul => g.mul(x[0], x[1])?,
            Scale => g.scale(x[0], -1.7),
            ScaleRows => g.scale_rows(x[0], x[1])?,
            Matmul => g.matmul(x[0], x[1])?,
            Transpose => g.transpose(x[0])?,
            ConcatRows => g.concat(&[x[0], x[1]], 0)?,
            ConcatCols => g.concat(&[x[0], x[1]], 1)?,
            Slice => {
                let c = g.shape(x[0])[1];
                g.slice(x[0], 1, 1, c - 1)?
            }
            Split => {
                let c = g.shape(x[0])[1];
                let parts = g.split(x[0], 1, &[1, c - 1])?;
                let a = weighted_sum(g, parts[0], self.seed)?;
                let b = weighted_sum(g, parts[1], self.seed + 1)?;
                return g.add(a, b);
            }
            Embedding => g.embedding(x[0], &self.ids)?,
            Sum => g.sum(x[0]),
            Mean => g.mean(x[0]),
            SumAxis0 => g.sum_axis(x[0], 0)?,
            SumAxis1 => g.sum_axis(x[0], 1)?,
            MeanAxis0 => g.mean_axis(x[0], 0)?,
            MeanAxis1 => g.mean_axis(x[0], 1)?,
            Sqrt => g.sqrt(x[0]),
            Log => g.log(x[0]),
            Exp => g.exp(x[0]),
            Silu => g.silu(x[0]),
            Maximum => g.maximum(x[0], x[1])?,
            ClampMin => g.clamp_min(x[0], 0.3),
            Softmax0 => g.softmax(x[0], 0)?,
            Softmax1 => g.softmax(x[0], 1)?,
            RmsNorm => g.rmsnorm(x[0], x[1], 1e-5)?,
            Rope => {
                let positions: Vec<usize> = (0..self.rows).map(|p| 3 * p + 1).collect();
                g.rope(x[0], self.heads, &positions, 10000.0)?
            }
            Attention => g.causal_attention(x[0], x[1], x[2], self.layout, self.heads)?,
            CrossEntropy => g.cross_entropy(x[0], &self.ids)?,
            Cosine => g.cosine_similarity(x[0], x[1])?,
            Dropout => g.dropout_with_mask(x[0], self.side.iter().map(|&v| T::of(v)).collect())?,
            GumbelSoftmax => {
                let shape = g.shape(x[0]).to_vec();
                let n = self.side.len() - 1;
                let noise: Tensor<T> = Tensor::from_f64(&shape, &self.side[..n])?;
                gumbel_softmax(g, x[0], self.side[n], false, Some(&noise))?.pi
            }
            EntropyLoss | LoadLoss => {
                let pi = g.softmax(x[0], 1)?;
                return if self.prim == EntropyLoss {
                    entropy_loss(g, pi)
                } else {
                    load_balance_loss(g, pi)
                };
            }
            LayerBlock => {
                let w = BlockWeights::from_array(std::array::from_fn(|i| x[i + 1]));
                let dims = BlockDims {
                    width: 4,
                    heads: self.heads,
                    ff: 6,
                    eps: 1e-5,
                    rope_base: 10000.0,
                    max_seq_len: 16,
                };
                layer_block(g, x[0], &w, &dims, self.layout, None)?
            }
        };
        if g.shape(out).is_empty() || g.value(out).numel() == 1 {
            return Ok(out);
        }
        weighted_sum(g, out, self.seed)
    }
}

pub fn check_prim(prim: Prim, seed: u64) -> Result<GradCheckReport> {
    let case = PrimCase::new(prim, seed);
    let inputs: Vec<Tensor<f32>> = case.inputs.iter().map(|t| t.cast()).collect();
    check_gradients(&case, &inputs, &GradCheckConfig { seed, ..Default::default() })
}

/// Full-model objective: CE plus both routing regularisers, routing noise
/// frozen by re-seeding the forward RNG on every evaluation.
pub struct ModelObjective {
    pub config: ModelConfig,
    pub weights: ModelWeights<ParamId>,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub layout: SeqLayout,
    pub noise_seed: u64,
}

impl Objective for ModelObjective {
    fn eval<T: Float>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let mut rng = RngState::new(self.noise_seed);
        let mut ctx = ForwardCtx {
            routing: RoutingMode::Sample,
            tau: self.config.gumbel.tau,
            hard: false,
            dropout_path: 0.0,
            rng: &mut rng,
        };
        let out = forward_with(&self.config, &self.weights, g, inputs, &self.tokens, self.layout, &mut ctx)?;
        let ce = cross_entropy(g, out.logits, &self.targets)?;
        let cfg = LossConfig {
            lambda_entropy: 0.1,
            lambda_load: 0.1,
            sign_entropy: 1,
            sign_load: 1,
        };
        Ok(total_loss(g, ce, &out.routing_pis(), &cfg)?.0)
    }
}

/// A tiny config of the given kind (`None` is the stacked baseline).
pub fn tiny_config(kind: ConnectionKind) -> ModelConfig {
    let mut c = presets::desk_parallel(kind).with_vocab(11);
    c.d_model = 8;
    c.d_path = 4;
    c.head_dim = 2;
    c.heads_layer = 4;
    c.heads_path = 2;
    c.ff_layer = 8;
    c.ff_path = 6;
    c.max_seq_len = 4;
    c.init_std = 0.3;
    if kind == ConnectionKind::None {
        c.n_parallel_layers = 0;
        c.d_path = 0;
        c.k_paths = 0;
        c.heads_path = 0;
        c.ff_path = 0;
    }
    c
}

/// Full-model finite-difference check at precision `T`. At f32 the floor is
/// 1e-2: single-precision accumulation leaves ~1e-6 absolute noise on
/// gradient elements, so tiny elements need a floor above that scale. The
/// f64 variant uses a 1e-6 floor.
pub fn check_model<T: Float>(kind: ConnectionKind, seed: u64) -> Result<GradCheckReport> {
    let c = tiny_config(kind);
    let m = Model::<f32>::build(&c, &mut RngState::derived(seed, "gradcheck-model"))?;
    let mut rng = RngState::new(seed);
    let tokens: Vec<u32> = (0..6).map(|_| rng.below(11) as u32).collect();
    let targets: Vec<u32> = (0..6).map(|_| rng.below(11) as u32).collect();
    let obj = ModelObjective {
        config: c,
        weights: m.weights.clone(),
        tokens,
        targets,
        layout: SeqLayout { batch: 2, seq: 3 },
        noise_seed: seed + 1000,
    };
    let inputs: Vec<Tensor<T>> = m.params.iter().map(|(_, p)| p.tensor.cast()).collect();
    let floor = if std::mem::size_of::<T>() == 4 { 1e-2 } else { 1e-6 };
    check_gradients(
        &obj,
        &inputs,
        &GradCheckConfig {
            step: 1e-5,
            floor,
            seed,
            ..Default::default()
        },
    )
}
