//! Parallel layers and the Connection Blocks that fuse their paths.
//!
//! A parallel layer runs `k` independent layer blocks of width `d'` on the
//! same input and fuses their outputs `f_1(x), …, f_k(x)` with one of:
//!
//! - **Share Linear**: `y = concat(f) W`, with `W` of shape `k·d' × d'`
//!   between parallel layers and `k·d' × d` for the final, expanding one.
//! - **Gumbel MoE v1**: `x_comb = concat(f) W_combine`, router logits
//!   `x_comb W_router` (`d' → k+1`).
//! - **Gumbel MoE v2**: router logits `concat(f) W_router` (`k·d' → k+1`)
//!   and a separate `x_comb = concat(f) W_combine`.
//!
//! Both Gumbel variants mix `y = Σ_i π_i f_i(x) + π_comb x_comb`, where `π`
//! comes from a Gumbel-Softmax over the `k + 1` router logits, per token.
//! The last Gumbel layer still routes (its weights are recorded and enter
//! the auxiliary losses) and hands `concat(f)` at width `k·d' = d` to the
//! closing layer block.

use crate::blocks::{block_param_count, layer_block, BlockDims, BlockWeights, FfnDropout};
use crate::config::ConnectionKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connection<H> {
    ShareLinear { w: H },
    GumbelV1 { combine: H, router: H },
    GumbelV2 { router: H, combine: H },
}

impl<H: Copy> Connection<H> {
    pub fn kind(&self) -> ConnectionKind {
        match self {
            Connection::ShareLinear { .. } => ConnectionKind::ShareLinear,
            Connection::GumbelV1 { .. } => ConnectionKind::GumbelV1,
            Connection::GumbelV2 { .. } => ConnectionKind::GumbelV2,
        }
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(H) -> U) -> Connection<U> {
        match *self {
            Connection::ShareLinear { w } => Connection::ShareLinear { w: f(w) },
            Connection::GumbelV1 { combine, router } => Connection::GumbelV1 {
                combine: f(combine),
                router: f(router),
            },
            Connection::GumbelV2 { router, combine } => Connection::GumbelV2 {
                router: f(router),
                combine: f(combine),
            },
        }
    }

    /// (name, handle) pairs in storage order.
    pub fn named(&self) -> Vec<(&'static str, H)> {
        match *self {
            Connection::ShareLinear { w } => vec![("w", w)],
            Connection::GumbelV1 { combine, router } => vec![("combine", combine), ("router", router)],
            Connection::GumbelV2 { router, combine } => vec![("router", router), ("combine", combine)],
        }
    }
}

/// Whether a connection feeds the next parallel layer or the closing block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnectionRole {
    Inter,
    Final,
}

/// Shapes of the connection weights, in the order of [`Connection::named`].
pub fn connection_shapes(
    kind: ConnectionKind,
    k: usize,
    d_path: usize,
    d_model: usize,
    role: ConnectionRole,
) -> Vec<(&'static str, Vec<usize>)> {
    let kd = k * d_path;
    match kind {
        ConnectionKind::None => Vec::new(),
        ConnectionKind::ShareLinear => {
            let out = if role == ConnectionRole::Final { d_model } else { d_path };
            vec![("w", vec![kd, out])]
        }
        ConnectionKind::GumbelV1 => vec![("combine", vec![kd, d_path]), ("router", vec![d_path, k + 1])],
        ConnectionKind::GumbelV2 => vec![("router", vec![kd, k + 1]), ("combine", vec![kd, d_path])],
    }
}

/// Closed-form parameter count of one parallel layer.
pub fn parallel_layer_param_count(
    kind: ConnectionKind,
    k: usize,
    d_path: usize,
    ff_path: usize,
    d_model: usize,
    role: ConnectionRole,
) -> usize {
    let conn: usize = connection_shapes(kind, k, d_path, d_model, role)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    k * block_param_count(d_path, ff_path) + conn
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelWeights<H> {
    pub paths: Vec<BlockWeights<H>>,
    pub connection: Connection<H>,
}

impl<H: Copy> ParallelWeights<H> {
    pub fn map<U: Copy>(&self, mut f: impl FnMut(H) -> U) -> ParallelWeights<U> {
        ParallelWeights {
            paths: self.paths.iter().map(|p| p.map(&mut f)).collect(),
            connection: self.connection.map(&mut f),
        }
    }
}

/// How routing weights are produced for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Fresh Gumbel noise per token.
    Sample,
    /// `softmax(logits / τ)` without noise.
    Deterministic,
    /// One-hot on the given slot (0-based; `k` is the combined slot).
    Forced(usize),
}

/// Per-forward state threaded through the parallel layers.
pub struct ForwardCtx<'a> {
    pub routing: RoutingMode,
    pub tau: f64,
    pub hard: bool,
    /// Dropout on path FFN outputs; zero outside training.
    pub dropout_path: f64,
    pub rng: &'a mut RngState,
}

/// Per-token routing simplex over `k` paths plus the combined slot.
#[derive(Clone, Debug)]
pub struct RoutingWeights {
    /// Soft routing probabilities, `N × (k+1)`.
    pub pi: Var,
    /// Weights actually used in the mixture (equal to `pi` unless hard or
    /// forced).
    pub mix: Var,
    /// Argmax slot per token (0-based, lowest index wins ties).
    pub selected: Vec<usize>,
}

/// Lowest-index argmax.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn one_hot_rows<T: Float>(rows: usize, width: usize, slots: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, width]);
    for (r, &s) in slots.iter().enumerate() {
        t.data_mut()[r * width + s] = T::one();
    }
    t
}

/// Gumbel-Softmax over `logits` (N × slots): `softmax((logits + noise) / τ)`.
/// With `hard`, the forward value is the one-hot argmax while gradients flow
/// through the soft weights.
pub fn gumbel_softmax<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
    hard: bool,
    noise: Option<&Tensor<T>>,
) -> Result<RoutingWeights> {
    if tau <= 0.0 {
        return Err(Error::config("gumbel.tau", format!("must be positive, got {tau}")));
    }
    let (n, slots) = g.value(logits).dims2()?;
    let perturbed = match noise {
        Some(noise) => {
            if noise.shape() != g.shape(logits) {
                return Err(Error::shape("gumbel_softmax", "noise shape"));
            }
            let nv = g.constant(noise.clone());
            g.add(logits, nv)?
        }
        None => logits,
    };
    let scaled = g.scale(perturbed, 1.0 / tau);
    let pi = g.softmax(scaled, 1)?;
    let selected: Vec<usize> = (0..n).map(|r| argmax(g.value(pi).row(r))).collect();
    let mix = if hard {
        g.straight_through(pi, one_hot_rows(n, slots, &selected))?
    } else {
        pi
    };
    Ok(RoutingWeights { pi, mix, selected })
}

fn routing_weights<T: Float>(g: &mut Graph<T>, logits: Var, ctx: &mut ForwardCtx<'_>) -> Result<RoutingWeights> {
    let (n, slots) = g.value(logits).dims2()?;
    match ctx.routing {
        RoutingMode::Forced(slot) => {
            if slot >= slots {
                return Err(Error::Input(format!("forced slot {slot} of {slots}")));
            }
            let selected = vec![slot; n];
            let pi = g.constant(one_hot_rows(n, slots, &selected));
            Ok(RoutingWeights { pi, mix: pi, selected })
        }
        RoutingMode::Deterministic => gumbel_softmax(g, logits, ctx.tau, ctx.hard, None),
        RoutingMode::Sample => {
            let noise = ctx.rng.gumbel_noise::<T>(&[n, slots]);
            gumbel_softmax(g, logits, ctx.tau, ctx.hard, Some(&noise))
        }
    }
}

pub fn down_projection<T: Float>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    g.matmul(x, w)
}

/// Runs every path on the same input; paths share no state.
pub fn run_paths<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    paths: &[BlockWeights<Var>],
    dims: &BlockDims,
    layout: SeqLayout,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    paths
        .iter()
        .map(|p| {
            let dropout = (ctx.dropout_path > 0.0).then_some(FfnDropout {
                p: ctx.dropout_path,
                rng: &mut *ctx.rng,
            });
            layer_block(g, x, p, dims, layout, dropout)
        })
        .collect()
}

pub fn concat_paths<T: Float>(g: &mut Graph<T>, outputs: &[Var]) -> Result<Var> {
    g.concat(outputs, 1)
}

pub fn share_linear_combine<T: Float>(g: &mut Graph<T>, outputs: &[Var], w: Var) -> Result<Var> {
    let cat = concat_paths(g, outputs)?;
    g.matmul(cat, w)
}

/// `Σ_i π_i f_i + π_comb x_comb`, row-wise.
pub fn mixture<T: Float>(g: &mut Graph<T>, outputs: &[Var], x_comb: Var, mix: Var) -> Result<Var> {
    let k = outputs.len();
    let mut acc: Option<Var> = None;
    for (i, &f) in outputs.iter().chain(std::iter::once(&x_comb)).enumerate() {
        let w = g.slice(mix, 1, i, 1)?;
        let term = g.scale_rows(f, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    debug_assert_eq!(g.shape(mix)[1], k + 1);
    Ok(acc.expect("at least one path"))
}

/// Gumbel MoE v1: route from the combined representation.
pub fn gumbel_v1_forward<T: Float>(
    g: &mut Graph<T>,
    outputs: &[Var],
    combine: Var,
    router: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, Var, RoutingWeights)> {
    let cat = concat_paths(g, outputs)?;
    let x_comb = g.matmul(cat, combine)?;
    let logits = g.matmul(x_comb, router)?;
    let rw = routing_weights(g, logits, ctx)?;
    let y = mixture(g, outputs, x_comb, rw.mix)?;
    Ok((y, x_comb, rw))
}

/// Gumbel MoE v2: route from the concatenated path outputs.
pub fn gumbel_v2_forward<T: Float>(
    g: &mut Graph<T>,
    outputs: &[Var],
    router: Var,
    combine: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, Var, RoutingWeights)> {
    let cat = concat_paths(g, outputs)?;
    let logits = g.matmul(cat, router)?;
    let rw = routing_weights(g, logits, ctx)?;
    let x_comb = g.matmul(cat, combine)?;
    let y = mixture(g, outputs, x_comb, rw.mix)?;
    Ok((y, x_comb, rw))
}

/// Everything a parallel layer produced, kept for loss and analysis.
#[derive(Clone, Debug)]
pub struct ParallelOutput {
    /// Input to the next stage (width `d'`, or `d` for the final layer).
    pub output: Var,
    pub path_outputs: Vec<Var>,
    /// Fused output of the connection block: the Gumbel mixture, or the
    /// Share Linear projection.
    pub fused: Var,
    pub x_comb: Option<Var>,
    pub routing: Option<RoutingWeights>,
    pub role: ConnectionRole,
}

pub fn parallel_layer_forward<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    w: &ParallelWeights<Var>,
    dims: &BlockDims,
    layout: SeqLayout,
    role: ConnectionRole,
    ctx: &mut ForwardCtx<'_>,
) -> Result<ParallelOutput> {
    let outs = run_paths(g, x, &w.paths, dims, layout, ctx)?;
    let (fused, x_comb, routing) = match w.connection {
        Connection::ShareLinear { w } => (share_linear_combine(g, &outs, w)?, None, None),
        Connection::GumbelV1 { combine, router } => {
            let (y, xc, rw) = gumbel_v1_forward(g, &outs, combine, router, ctx)?;
            (y, Some(xc), Some(rw))
        }
        Connection::GumbelV2 { router, combine } => {
            let (y, xc, rw) = gumbel_v2_forward(g, &outs, router, combine, ctx)?;
            (y, Some(xc), Some(rw))
        }
    };
    let output = match (role, routing.is_some()) {
        (ConnectionRole::Final, true) => concat_paths(g, &outs)?,
        _ => fused,
    };
    Ok(ParallelOutput {
        output,
        path_outputs: outs,
        fused,
        x_comb,
        routing,
        role,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::init_block;

    fn ctx(rng: &mut RngState, routing: RoutingMode) -> ForwardCtx<'_> {
        ForwardCtx {
            routing,
            tau: 1.0,
            hard: false,
            dropout_path: 0.0,
            rng,
        }
    }

    #[test]
    fn equal_logits_give_uniform_weights() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::full(&[2, 3], 0.7));
        for tau in [0.1, 1.0, 5.0] {
            let rw = gumbel_softmax(&mut g, l, tau, false, None).unwrap();
            assert!(g.value(rw.pi).data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
            assert_eq!(rw.selected, vec![0, 0]);
        }
    }

    #[test]
    fn saturated_logits() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[1, 3], &[10., 0., 0.]).unwrap());
        let rw = gumbel_softmax(&mut g, l, 1.0, false, None).unwrap();
        assert!(g.value(rw.pi).data()[0] > 0.9999);
    }

    #[test]
    fn hard_mode_is_one_hot_forward() {
        let mut g = Graph::<f64>::new();
        let l = g.param(Tensor::from_f64(&[2, 3], &[0.1, 0.5, 0.2, 2.0, 0.0, 1.0]).unwrap());
        let rw = gumbel_softmax(&mut g, l, 1.0, true, None).unwrap();
        assert_eq!(g.value(rw.mix).data(), &[0., 1., 0., 1., 0., 0.]);
        let s = g.sum(rw.mix);
        let sq = g.mul(rw.mix, rw.mix).unwrap();
        let s2 = g.sum(sq);
        let tot = g.add(s, s2).unwrap();
        g.backward(tot).unwrap();
        assert!(g.grad(l).unwrap().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn paths_are_independent() {
        let mut rng = RngState::new(9);
        let dims = BlockDims {
            width: 4,
            heads: 2,
            ff: 8,
            eps: 1e-5,
            rope_base: 1e4,
            max_seq_len: 16,
        };
        let p1 = init_block::<f64>(4, 8, 0.3, &mut rng);
        let p2 = init_block::<f64>(4, 8, 0.3, &mut rng);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        let run = |a: &[Tensor<f64>; 9], b: &[Tensor<f64>; 9]| {
            let mut g = Graph::<f64>::new();
            let wa = BlockWeights::from_array(a.clone().map(|t| g.param(t)));
            let wb = BlockWeights::from_array(b.clone().map(|t| g.param(t)));
            let xv = g.constant(x.clone());
            let mut r = RngState::new(0);
            let outs = run_paths(&mut g, xv, &[wa, wb], &dims, SeqLayout::single(3), &mut ctx(&mut r, RoutingMode::Deterministic)).unwrap();
            (g.value(outs[0]).clone(), g.value(outs[1]).clone())
        };
        let (a, b) = run(&p1, &p2);
        let (a2, _) = run(&p1, &p1);
        assert!(a.same_values(&a2));
        let mut p1_perturbed = p1.clone();
        p1_perturbed[0].data_mut()[0] += 0.5;
        let (a3, b3) = run(&p1_perturbed, &p2);
        assert!(b.same_values(&b3));
        assert!(!a.same_values(&a3));
        assert_eq!(a.shape(), &[3, 4]);
    }

    #[test]
    fn table_dimensions() {
        let v1 = connection_shapes(ConnectionKind::GumbelV1, 2, 128, 256, ConnectionRole::Inter);
        assert_eq!(v1, vec![("combine", vec![256, 128]), ("router", vec![128, 3])]);
        let v2 = connection_shapes(ConnectionKind::GumbelV2, 2, 128, 256, ConnectionRole::Inter);
        assert_eq!(v2, vec![("router", vec![256, 3]), ("combine", vec![256, 128])]);
        let sl = connection_shapes(ConnectionKind::ShareLinear, 2, 128, 256, ConnectionRole::Final);
        assert_eq!(sl, vec![("w", vec![256, 256])]);
    }
}
