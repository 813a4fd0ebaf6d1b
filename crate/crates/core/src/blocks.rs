//! LLaMA-style building blocks: RMSNorm, rotary embeddings, causal
//! multi-head attention, SwiGLU feed-forward, and the pre-norm layer block.
//!
//! Activations are row-stacked: a batch of `B` sequences of length `T` at
//! width `d` is a `(B·T) × d` tensor described by a [`SeqLayout`]. Linear
//! maps have no bias and multiply from the right (`y = x W`).

use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// Parameters of one layer block, generic over the handle type so the same
/// layout serves stored ids and bound graph variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWeights<H> {
    pub wq: H,
    pub wk: H,
    pub wv: H,
    pub wo: H,
    pub w_gate: H,
    pub w_up: H,
    pub w_down: H,
    pub norm1: H,
    pub norm2: H,
}

/// Parameter names within a block, in storage order.
pub const BLOCK_PARAM_NAMES: [&str; 9] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ffn.w_gate",
    "ffn.w_up",
    "ffn.w_down",
    "norm1.scale",
    "norm2.scale",
];

impl<H: Copy> BlockWeights<H> {
    pub fn from_array(a: [H; 9]) -> Self {
        let [wq, wk, wv, wo, w_gate, w_up, w_down, norm1, norm2] = a;
        BlockWeights {
            wq,
            wk,
            wv,
            wo,
            w_gate,
            w_up,
            w_down,
            norm1,
            norm2,
        }
    }

    pub fn to_array(&self) -> [H; 9] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w_gate,
            self.w_up,
            self.w_down,
            self.norm1,
            self.norm2,
        ]
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(H) -> U) -> BlockWeights<U> {
        BlockWeights::from_array(self.to_array().map(&mut f))
    }

    /// Shapes of each parameter for a block of `width` and FF size `ff`.
    pub fn shapes(width: usize, ff: usize) -> [Vec<usize>; 9] {
        [
            vec![width, width],
            vec![width, width],
            vec![width, width],
            vec![width, width],
            vec![width, ff],
            vec![width, ff],
            vec![ff, width],
            vec![width],
            vec![width],
        ]
    }
}

/// Closed-form parameter count of one block.
pub fn block_param_count(width: usize, ff: usize) -> usize {
    4 * width * width + 3 * width * ff + 2 * width
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDims {
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
    pub eps: f64,
    pub rope_base: f64,
    pub max_seq_len: usize,
}

impl BlockDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Inverted dropout applied to the FFN output of a block.
pub struct FfnDropout<'a> {
    pub p: f64,
    pub rng: &'a mut RngState,
}

pub fn rmsnorm<T: Float>(g: &mut Graph<T>, x: Var, scale: Var, eps: f64) -> Result<Var> {
    g.rmsnorm(x, scale, eps)
}

/// Row `r` of `x` sits at position `r % layout.seq`.
pub fn rope<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    heads: usize,
    layout: SeqLayout,
    base: f64,
) -> Result<Var> {
    let positions: Vec<usize> = (0..layout.rows()).map(|r| r % layout.seq).collect();
    g.rope(x, heads, &positions, base)
}

pub fn causal_mha<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    w: &BlockWeights<Var>,
    dims: &BlockDims,
    layout: SeqLayout,
) -> Result<Var> {
    if layout.seq > dims.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            layout.seq, dims.max_seq_len
        )));
    }
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let q = rope(g, q, dims.heads, layout, dims.rope_base)?;
    let k = rope(g, k, dims.heads, layout, dims.rope_base)?;
    let att = g.causal_attention(q, k, v, layout, dims.heads)?;
    g.matmul(att, w.wo)
}

/// `w_down(silu(x w_gate) ⊙ (x w_up))`.
pub fn swiglu_ffn<T: Float>(g: &mut Graph<T>, x: Var, w: &BlockWeights<Var>) -> Result<Var> {
    let gate = g.matmul(x, w.w_gate)?;
    let gate = g.silu(gate);
    let up = g.matmul(x, w.w_up)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, w.w_down)
}

/// `h = x + mha(norm1(x)); y = h + ffn(norm2(h))`.
pub fn layer_block<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    w: &BlockWeights<Var>,
    dims: &BlockDims,
    layout: SeqLayout,
    dropout: Option<FfnDropout<'_>>,
) -> Result<Var> {
    let n1 = rmsnorm(g, x, w.norm1, dims.eps)?;
    let att = causal_mha(g, n1, w, dims, layout)?;
    let h = g.add(x, att)?;
    let n2 = rmsnorm(g, h, w.norm2, dims.eps)?;
    let mut ffn = swiglu_ffn(g, n2, w)?;
    if let Some(FfnDropout { p, rng }) = dropout {
        if p > 0.0 {
            let keep = T::of(1.0 / (1.0 - p));
            let mask = (0..g.value(ffn).numel())
                .map(|_| if rng.uniform() < p { T::zero() } else { keep })
                .collect();
            ffn = g.dropout_with_mask(ffn, mask)?;
        }
    }
    g.add(h, ffn)
}

/// Fresh block weights: normal(0, std) projections and unit norm scales.
pub fn init_block<T: Float>(width: usize, ff: usize, std: f64, rng: &mut RngState) -> [Tensor<T>; 9] {
    BlockWeights::<()>::shapes(width, ff).map(|shape| {
        if shape.len() == 1 {
            Tensor::ones(&shape)
        } else {
            rng.normal_tensor(&shape, std)
        }
    })
}
