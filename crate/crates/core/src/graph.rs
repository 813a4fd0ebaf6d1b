//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, which is already a topological order, so [`Graph::backward`] is a
//! single reverse sweep. Graphs are built for one forward pass and dropped
//! after the gradients have been harvested.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, gemm, Float, MatView, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch geometry of row-stacked sequences: row `b * seq + t` holds
/// position `t` of sequence `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
}

impl SeqLayout {
    pub fn single(seq: usize) -> Self {
        SeqLayout { batch: 1, seq }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Mean(Var),
    MeanAxis { input: Var, axis: usize },
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    Silu(Var),
    Maximum(Var, Var),
    ClampMin(Var, T),
    Softmax { input: Var, axis: usize },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<T> },
    Rope { x: Var, heads: usize, positions: Vec<usize>, base: f64 },
    Attention { q: Var, k: Var, v: Var, layout: SeqLayout, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Cosine { a: Var, b: Var },
    Dropout { input: Var, mask: Vec<T> },
    StraightThrough { soft: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Silu(..) => "silu",
            Op::Maximum(..) => "maximum",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Dropout { .. } => "dropout",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rotates the pair `(a, b)` by `angle` radians.
pub fn rotate_pair(a: f64, b: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (a * c - b * s, a * s + b * c)
}

/// Rotation angle for pair `j` of a head of width `head_dim` at `pos`.
pub fn rope_angle(pos: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    let theta = base.powf(-2.0 * pair as f64 / head_dim as f64);
    theta * pos as f64
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        let value = Tensor::new(&shape, t.into_data()).expect("valid tensor");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// First node whose value is not finite, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(op, format!("expected rank ≤ 2, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn zip_binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_binary(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_binary(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_binary(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.map_unary(a, |v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies row `r` of `x` (N×D) by `w[r]`, `w` shaped N×1.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "scale_rows")?;
        if self.shape(w) != [n, 1] {
            return Err(Error::shape(
                "scale_rows",
                format!("weights {:?} for rows of {:?}", self.shape(w), self.shape(x)),
            ));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let data = (0..n * d).map(|i| xv[i] * wv[i / d]).collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::ScaleRows(x, w), &[x, w]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b)).map_err(|_| {
            Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            )
        })?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("split", format!("axis {axis}")))?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape("split", format!("sizes {sizes:?} vs extent {extent}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} out of range for vocab {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        let m = s / x.numel() as f64;
        self.push(Tensor::scalar(T::of(m)), Op::Mean(a), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    acc[o * inner + i] += x[(o * len + l) * inner + i].as_f64();
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok((out_shape, acc))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, acc) = self.reduce_axis(a, axis, "sum_axis")?;
        let out = Tensor::new(&shape, acc.into_iter().map(T::of).collect())?;
        Ok(self.push(out, Op::SumAxis { input: a, axis }, &[a]))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let (shape, acc) = self.reduce_axis(a, axis, "mean_axis")?;
        let out = Tensor::new(&shape, acc.into_iter().map(|s| T::of(s / len)).collect())?;
        Ok(self.push(out, Op::MeanAxis { input: a, axis }, &[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, |v| v.sqrt());
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, |v| v.ln());
        self.push(out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, |v| v.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.map_unary(a, |v| T::of(v.as_f64() * sigmoid(v.as_f64())));
        self.push(out, Op::Silu(a), &[a])
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "maximum")?;
        let out = self.zip_binary(a, b, |p, q| if p >= q { p } else { q });
        Ok(self.push(out, Op::Maximum(a, b), &[a, b]))
    }

    /// `max(a, c)`; gradient passes only where `a > c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.map_unary(a, |v| if v > c { v } else { c });
        self.push(out, Op::ClampMin(a, c), &[a])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[idx(l)]).fold(T::neg_infinity(), T::max);
                let mut z = 0.0f64;
                for l in 0..len {
                    let e = (x[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    z += e.as_f64();
                }
                let inv = T::of(1.0 / z);
                for l in 0..len {
                    out[idx(l)] *= inv;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Row-wise RMS normalisation: `scale * x / sqrt(mean(x²) + eps)`.
    pub fn rmsnorm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x, "rmsnorm")?;
        if self.value(scale).numel() != d {
            return Err(Error::shape(
                "rmsnorm",
                format!("scale {:?} for width {d}", self.shape(scale)),
            ));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let mut inv_rms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d as f64;
            let inv = T::of(1.0 / (ms + eps).sqrt());
            inv_rms.push(inv);
            data.extend(row.iter().zip(sv).map(|(&v, &s)| s * v * inv));
        }
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::RmsNorm { x, scale, inv_rms }, &[x, scale]))
    }

    /// Rotary embedding over rows of `x` (N × heads·head_dim); row `r` sits
    /// at `positions[r]`. Pair `(2j, 2j+1)` of each head is rotated by
    /// `pos · base^(-2j/head_dim)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let (n, width) = self.dims2(x, "rope")?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("rope", format!("width {width} not divisible by {heads} heads")));
        }
        let hd = width / heads;
        if !hd.is_multiple_of(2) {
            return Err(Error::config("head_dim", format!("rope needs an even head dim, got {hd}")));
        }
        if positions.len() != n {
            return Err(Error::shape("rope", format!("{} positions for {n} rows", positions.len())));
        }
        let xv = self.value(x).data();
        let mut data = xv.to_vec();
        for (r, &pos) in positions.iter().enumerate() {
            for j in 0..hd / 2 {
                let (s, c) = rope_angle(pos, j, hd, base).sin_cos();
                let (s, c) = (T::of(s), T::of(c));
                for h in 0..heads {
                    let i = r * width + h * hd + 2 * j;
                    let (a, b) = (xv[i], xv[i + 1]);
                    data[i] = a * c - b * s;
                    data[i + 1] = a * s + b * c;
                }
            }
        }
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(
            out,
            Op::Rope {
                x,
                heads,
                positions: positions.to_vec(),
                base,
            },
            &[x],
        ))
    }

    /// Scaled dot-product attention with a strict causal mask, per sequence
    /// and head. `q`, `k`, `v` are (batch·seq) × (heads·head_dim).
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        let (n, width) = self.dims2(q, "causal_attention")?;
        if n != layout.rows() {
            return Err(Error::shape(
                "causal_attention",
                format!("{n} rows for layout {layout:?}"),
            ));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("causal_attention", format!("width {width}, heads {heads}")));
        }
        let hd = width / heads;
        let t = layout.seq;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); layout.batch * heads * t * t];
        let mut out = vec![T::zero(); n * width];
        for b in 0..layout.batch {
            for h in 0..heads {
                let off = b * t * width + h * hd;
                let p_off = (b * heads + h) * t * t;
                let qm = MatView { data: qv, offset: off, rows: t, cols: hd, rs: width, cs: 1 };
                let km = MatView { data: kv, offset: off, rows: t, cols: hd, rs: width, cs: 1 };
                let vm = MatView { data: vv, offset: off, rows: t, cols: hd, rs: width, cs: 1 };
                gemm(scale, qm, km.t(), T::zero(), &mut probs, p_off, t, 1);
                let block = &mut probs[p_off..p_off + t * t];
                for i in 0..t {
                    let row = &mut block[i * t..(i + 1) * t];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = 0.0f64;
                    for x in row[..=i].iter_mut() {
                        *x = (*x - max).exp();
                        z += x.as_f64();
                    }
                    let inv = T::of(1.0 / z);
                    row[..=i].iter_mut().for_each(|x| *x *= inv);
                    row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                let pm = MatView { data: &probs[..], offset: p_off, rows: t, cols: t, rs: t, cs: 1 };
                gemm(T::one(), pm, vm, T::zero(), &mut out, off, width, 1);
            }
        }
        let out = Tensor::new(&[n, width], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities saved by a [`Graph::causal_attention`] node,
    /// laid out `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean token negative log-likelihood of `targets` under `logits` (N×V).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target id {bad} out of range for vocab {vocab}")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * vocab];
        let mut nll = 0.0f64;
        for r in 0..n {
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + z.ln();
            nll += lse - row[targets[r]].as_f64();
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = T::of((v.as_f64() - lse).exp());
            }
        }
        let out = Tensor::scalar(T::of(nll / n as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row-wise cosine similarity `a·b / (‖a‖‖b‖)`, shaped N×1.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let (n, d) = self.dims2(a, "cosine_similarity")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|r| {
                let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                let (dot, na, nb) = cos_parts(x, y);
                T::of(dot / (na * nb))
            })
            .collect();
        let out = Tensor::new(&[n, 1], data)?;
        Ok(self.push(out, Op::Cosine { a, b }, &[a, b]))
    }

    /// Inverted dropout with a precomputed keep-mask of 0 / (1/(1-p)).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("dropout", "mask length"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Dropout { input: a, mask }, &[a]))
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", "hard/soft shape"));
        }
        let hard = hard.with_requires_grad(false);
        Ok(self.push(hard, Op::StraightThrough { soft }, &[soft]))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d`loss`/d(node) to every node that requires gradients and
    /// adds the result into the leaves' stored gradients. Calling it twice
    /// without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(grads, v, self, |dst| axpy(dst, g, T::one()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, self, |dst| axpy(dst, g, T::one()));
                }
                if needs(*b) {
                    add_into(grads, *b, self, |dst| axpy(dst, g, -T::one()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    add_into(grads, *a, self, |dst| {
                        dst.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&g, &y))| *d += g * y)
                    });
                }
                if needs(*b) {
                    add_into(grads, *b, self, |dst| {
                        dst.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&g, &x))| *d += g * x)
                    });
                }
            }
            Op::Scale(a, c) => {
                add_into(grads, *a, self, |dst| axpy(dst, g, *c));
            }
            Op::ScaleRows(x, w) => {
                let (n, d) = self.value(*x).dims2().expect("2d");
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if needs(*x) {
                    add_into(grads, *x, self, |dst| {
                        for i in 0..n * d {
                            dst[i] += g[i] * wv[i / d];
                        }
                    });
                }
                if needs(*w) {
                    add_into(grads, *w, self, |dst| {
                        for r in 0..n {
                            let mut s = T::zero();
                            for c in 0..d {
                                s += g[r * d + c] * xv[r * d + c];
                            }
                            dst[r] += s;
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2d");
                let (_, n) = self.value(*b).dims2().expect("2d");
                let gm = MatView::row_major(g, m, n);
                if needs(*a) {
                    let bm = MatView::row_major(self.value(*b).data(), k, n);
                    add_into(grads, *a, self, |dst| gemm(T::one(), gm, bm.t(), T::one(), dst, 0, k, 1));
                }
                if needs(*b) {
                    let am = MatView::row_major(self.value(*a).data(), m, k);
                    add_into(grads, *b, self, |dst| gemm(T::one(), am.t(), gm, T::one(), dst, 0, n, 1));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("2d");
                add_into(grads, *a, self, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if needs(v) {
                        add_into(grads, v, self, |dst| {
                            for o in 0..outer {
                                let src = (o * total + start) * inner;
                                let d0 = o * len * inner;
                                axpy(&mut dst[d0..d0 + len * inner], &g[src..src + len * inner], T::one());
                            }
                        });
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*input), *axis);
                let len = node.value.shape()[*axis];
                add_into(grads, *input, self, |dst| {
                    for o in 0..outer {
                        let d0 = (o * full + start) * inner;
                        let s0 = o * len * inner;
                        axpy(&mut dst[d0..d0 + len * inner], &g[s0..s0 + len * inner], T::one());
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                add_into(grads, *table, self, |dst| {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(&mut dst[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], T::one());
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                add_into(grads, *a, self, |dst| dst.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / T::of(self.value(*a).numel() as f64);
                add_into(grads, *a, self, |dst| dst.iter_mut().for_each(|d| *d += g0));
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*input), *axis);
                let f = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::of(1.0 / len as f64)
                } else {
                    T::one()
                };
                add_into(grads, *input, self, |dst| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                dst[(o * len + l) * inner + i] += g[o * inner + i] * f;
                            }
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                add_into(grads, *a, self, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] / (two * out[i]);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                add_into(grads, *a, self, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] / x[i];
                    }
                });
            }
            Op::Exp(a) => {
                add_into(grads, *a, self, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * out[i];
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                add_into(grads, *a, self, |dst| {
                    for i in 0..dst.len() {
                        let xv = x[i].as_f64();
                        let s = sigmoid(xv);
                        dst[i] += g[i] * T::of(s * (1.0 + xv * (1.0 - s)));
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    add_into(grads, *a, self, |dst| {
                        for i in 0..dst.len() {
                            if av[i] >= bv[i] {
                                dst[i] += g[i];
                            }
                        }
                    });
                }
                if needs(*b) {
                    add_into(grads, *b, self, |dst| {
                        for i in 0..dst.len() {
                            if av[i] < bv[i] {
                                dst[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::ClampMin(a, c) => {
                let x = self.value(*a).data();
                add_into(grads, *a, self, |dst| {
                    for i in 0..dst.len() {
                        if x[i] > *c {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                add_into(grads, *input, self, |dst| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                            for l in 0..len {
                                dst[idx(l)] += out[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (n, d) = self.value(*x).dims2().expect("2d");
                let (xv, sv) = (self.value(*x).data(), self.value(*scale).data());
                if needs(*x) {
                    add_into(grads, *x, self, |dst| {
                        for r in 0..n {
                            let inv = inv_rms[r];
                            let row = r * d;
                            // d/dx_i of s_i x_i inv: inv*(g s)_i - inv^3/d * x_i * Σ (g s x)
                            let dot: T = (0..d).map(|c| g[row + c] * sv[c] * xv[row + c]).sum();
                            let k = inv * inv * inv * dot / T::of(d as f64);
                            for c in 0..d {
                                dst[row + c] += inv * g[row + c] * sv[c] - k * xv[row + c];
                            }
                        }
                    });
                }
                if needs(*scale) {
                    add_into(grads, *scale, self, |dst| {
                        for r in 0..n {
                            for c in 0..d {
                                dst[c] += g[r * d + c] * xv[r * d + c] * inv_rms[r];
                            }
                        }
                    });
                }
            }
            Op::Rope { x, heads, positions, base } => {
                let width = self.shape(*x)[1];
                let hd = width / heads;
                add_into(grads, *x, self, |dst| {
                    for (r, &pos) in positions.iter().enumerate() {
                        for j in 0..hd / 2 {
                            let (s, c) = rope_angle(pos, j, hd, *base).sin_cos();
                            let (s, c) = (T::of(s), T::of(c));
                            for h in 0..*heads {
                                let i = r * width + h * hd + 2 * j;
                                let (ga, gb) = (g[i], g[i + 1]);
                                dst[i] += ga * c + gb * s;
                                dst[i + 1] += -ga * s + gb * c;
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, layout, heads, probs } => {
                self.attention_backward(*q, *k, *v, *layout, *heads, probs, g, grads);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.shape(*logits)[1];
                let n = targets.len();
                let f = g[0] / T::of(n as f64);
                add_into(grads, *logits, self, |dst| {
                    for r in 0..n {
                        for c in 0..vocab {
                            dst[r * vocab + c] += f * probs[r * vocab + c];
                        }
                        dst[r * vocab + targets[r]] -= f;
                    }
                });
            }
            Op::Cosine { a, b } => {
                let (n, d) = self.value(*a).dims2().expect("2d");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for (src, other, target) in [(av, bv, *a), (bv, av, *b)] {
                    if !needs(target) {
                        continue;
                    }
                    add_into(grads, target, self, |dst| {
                        for r in 0..n {
                            let (x, y) = (&src[r * d..(r + 1) * d], &other[r * d..(r + 1) * d]);
                            let (dot, nx, ny) = cos_parts(x, y);
                            let c = dot / (nx * ny);
                            let gr = g[r].as_f64();
                            for i in 0..d {
                                let val = y[i].as_f64() / (nx * ny) - c * x[i].as_f64() / (nx * nx);
                                dst[r * d + i] += T::of(gr * val);
                            }
                        }
                    });
                }
            }
            Op::Dropout { input, mask } => {
                add_into(grads, *input, self, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * mask[i];
                    }
                });
            }
            Op::StraightThrough { soft } => {
                add_into(grads, *soft, self, |dst| axpy(dst, g, T::one()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = self.shape(q)[1];
        let n = layout.rows();
        let hd = width / heads;
        let t = layout.seq;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); n * width];
        let mut dk = vec![T::zero(); n * width];
        let mut dv = vec![T::zero(); n * width];
        let mut dp = vec![T::zero(); t * t];
        for b in 0..layout.batch {
            for h in 0..heads {
                let off = b * t * width + h * hd;
                let p_off = (b * heads + h) * t * t;
                let view = |data| MatView { data, offset: off, rows: t, cols: hd, rs: width, cs: 1 };
                let pm = MatView { data: probs, offset: p_off, rows: t, cols: t, rs: t, cs: 1 };
                // dV = Pᵀ dO
                gemm(T::one(), pm.t(), view(g), T::one(), &mut dv, off, width, 1);
                // dP = dO Vᵀ
                gemm(T::one(), view(g), view(vv).t(), T::zero(), &mut dp, 0, t, 1);
                // dS = P ⊙ (dP - rowsum(dP ⊙ P))
                let p = &probs[p_off..p_off + t * t];
                for i in 0..t {
                    let row = i * t;
                    let dot: T = (0..=i).map(|j| dp[row + j] * p[row + j]).sum();
                    for j in 0..t {
                        dp[row + j] = if j <= i { p[row + j] * (dp[row + j] - dot) } else { T::zero() };
                    }
                }
                let dsm = MatView::row_major(&dp[..], t, t);
                gemm(scale, dsm, view(kv), T::one(), &mut dq, off, width, 1);
                gemm(scale, dsm.t(), view(qv), T::one(), &mut dk, off, width, 1);
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                add_into(grads, var, self, |dst| axpy(dst, &d, T::one()));
            }
        }
    }
}

fn cos_parts<T: Float>(x: &[T], y: &[T]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    (dot, nx.sqrt().max(1e-12), ny.sqrt().max(1e-12))
}

fn axpy<T: Float>(dst: &mut [T], src: &[T], alpha: T) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += alpha * s);
}

fn add_into<T: Float>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    graph: &Graph<T>,
    f: impl FnOnce(&mut [T]),
) {
    if !graph.nodes[v.0].requires_grad {
        return;
    }
    let n = graph.nodes[v.0].value.numel();
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(slot);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);
        // accumulate on a second call
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4., 8., 12.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[0., 0., 0.]));
        let s = g.softmax(a, 0).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let b = g.constant(t(&[3], &[1000., 0., 0.]));
        let s = g.softmax(b, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-6);
        let c = g.constant(t(&[3], &[1., 2., 3.]));
        let s = g.softmax(c, 0).unwrap();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        let expect = [(1f64).exp() / z, (2f64).exp() / z, (3f64).exp() / z];
        for (p, e) in g.value(s).data().iter().zip(expect) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!((expect[0] - 0.09003).abs() < 1e-5);
        assert!((expect[1] - 0.24473).abs() < 1e-5);
        assert!((expect[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[7., 8.]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 7., 4., 5., 6., 8.]);
        let parts = g.split(c, 1, &[3, 1]).unwrap();
        assert_eq!(g.value(parts[0]).data(), g.value(a).data());
        assert_eq!(g.value(parts[1]).data(), g.value(b).data());
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        assert!(g.add(a, b).is_ok());
        let c = g.constant(Tensor::ones(&[3, 2]));
        assert!(g.add(a, c).is_err());
        let table = g.constant(Tensor::ones(&[4, 2]));
        assert!(matches!(g.embedding(table, &[4]), Err(Error::Input(_))));
    }

    #[test]
    fn attention_single_token_is_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 4], &[1., 2., 3., 4.]));
        let k = g.constant(t(&[1, 4], &[0.5, -1., 2., 0.]));
        let v = g.constant(t(&[1, 4], &[9., 8., 7., 6.]));
        let o = g.causal_attention(q, k, v, SeqLayout::single(1), 2).unwrap();
        assert_eq!(g.value(o).data(), &[9., 8., 7., 6.]);
        assert_eq!(g.attention_probs(o).unwrap(), &[1.0, 1.0]);
    }
}
