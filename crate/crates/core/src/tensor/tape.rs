use std::borrow::Cow;
use std::collections::HashMap;

use super::fault::{self, FaultOp};
use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{check_shape, numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Keep/drop mask whose shape is a suffix of the tensor it applies to; it is
/// broadcast over the leading dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        check_shape(&shape)?;
        if numel(&shape) != keep.len() {
            return Err(Error::Shape {
                op: "mask",
                lhs: shape,
                rhs: vec![keep.len()],
            });
        }
        Ok(Self { shape, keep })
    }

    /// Builds a mask from 0/1 values; anything non-zero is kept.
    pub fn from_values(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| v != 0.0).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: f64,
    },
    Relu6 {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    RsqrtEps {
        a: usize,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    SumAll {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    SliceLast {
        a: usize,
        start: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    InterpGather {
        seq: usize,
        pos: usize,
    },
    DeformSample {
        x: usize,
        offsets: usize,
        heads: usize,
        valid_len: usize,
        order: Vec<Vec<usize>>,
    },
    CopeInterp {
        table: usize,
        pos: usize,
    },
    Cumsum {
        a: usize,
        reverse: bool,
    },
    DepthwiseConv {
        x: usize,
        w: usize,
        b: usize,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        pad: usize,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu6 { .. } => "relu6",
            Op::Sigmoid { .. } => "sigmoid",
            Op::RsqrtEps { .. } => "rsqrt",
            Op::Clamp { .. } => "clamp",
            Op::SumAll { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::SliceLast { .. } => "slice",
            Op::Embedding { .. } => "embedding_lookup",
            Op::InterpGather { .. } => "interp_gather",
            Op::DeformSample { .. } => "deform_sample",
            Op::CopeInterp { .. } => "cope_interp",
            Op::Cumsum { .. } => "cumsum",
            Op::DepthwiseConv { .. } => "conv1d_depthwise",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn fault(&self) -> Option<FaultOp> {
        Some(match self {
            Op::MatMul { .. } => FaultOp::MatMul,
            Op::Softmax { .. } => FaultOp::Softmax,
            Op::LayerNorm { .. } => FaultOp::LayerNorm,
            Op::Relu6 { .. } => FaultOp::Relu6,
            Op::Sigmoid { .. } => FaultOp::Sigmoid,
            Op::DepthwiseConv { .. } => FaultOp::Conv1dDepthwise,
            Op::Embedding { .. } => FaultOp::Embedding,
            Op::InterpGather { .. } => FaultOp::InterpGather,
            _ => return None,
        })
    }
}

struct Node<'p, R: Real> {
    value: Cow<'p, [R]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in creation order, so every node's inputs precede it.
/// [`Tape::backward`] walks the nodes once in reverse and then clears the
/// tape. Leaves created with [`Tape::leaf`] borrow `f32` parameter storage
/// without copying when `R = f32`.
pub struct Tape<'p, R: Real> {
    nodes: Vec<Node<'p, R>>,
}

impl<'p, R: Real> Default for Tape<'p, R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the trainable leaves, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<R: Real> {
    leaves: HashMap<usize, Vec<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<R>> {
        self.leaves.remove(&v.0)
    }

    /// Adds the gradient of leaf `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.leaves.get(&v.0) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Per-output-dim strides into `shape` (0 where broadcast).
fn bstrides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_bcast(
    out: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a_shape == out && b_shape == out {
        for o in 0..n {
            f(o, o, o);
        }
        return;
    }
    let nb = numel(b_shape);
    if a_shape == out && out.ends_with(b_shape) {
        for o in 0..n {
            f(o, o, o % nb);
        }
        return;
    }
    let sa = bstrides(a_shape, out);
    let sb = bstrides(b_shape, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for o in 0..n {
        f(o, ai, bi);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ai -= sa[d] * out[d];
            bi -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(outer, len, inner)` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Linear interpolation coordinates for a clamped fractional position.
#[inline]
fn interp_coords(p: f64, len: usize) -> (usize, usize, f64) {
    let fl = p.floor();
    let z = p - fl;
    let fl = fl as usize;
    let ce = if z > 0.0 { (fl + 1).min(len - 1) } else { fl };
    (fl, ce, z)
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a recorded value out as an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_fn(&n.shape, |i| n.value[i].as_f32())
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Cow<'p, [R]>, shape: Vec<usize>, op: Op, inputs: &[usize]) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        if !matches!(op, Op::Leaf | Op::Constant) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = match op {
            Op::Leaf | Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, value: Vec<R>, shape: Vec<usize>, op: Op, inputs: &[usize]) -> Result<Var> {
        self.push(Cow::Owned(value), shape, op, inputs)
    }

    /// Records a tensor as a leaf, borrowing its storage. Gradients are
    /// produced for it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: R::view(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned value as a leaf.
    pub fn input(&mut self, shape: &[usize], data: Vec<R>, requires_grad: bool) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(shape_err("input", shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "input".into() });
        }
        self.nodes.push(Node {
            value: Cow::Owned(data),
            shape: shape.to_vec(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<R>) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(shape_err("constant", shape, &[data.len()]));
        }
        self.push_owned(data, shape.to_vec(), Op::Constant, &[])
    }

    pub fn constant_f32(&mut self, shape: &[usize], data: &[f32]) -> Result<Var> {
        self.constant(shape, data.iter().map(|&v| R::of(v as f64)).collect())
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `a[..,M,K] · b[..,K,N]`. A rank-2 operand is
    /// broadcast across the other's batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..,M,K] · b[..,N,K]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(
        sa: &[usize],
        sb: &[usize],
        trans_b: bool,
    ) -> Result<(usize, usize, usize, usize, bool, bool, Vec<usize>)> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch, a_bc, b_bc, bshape) = if ba == bb {
            (numel(ba), false, false, ba.to_vec())
        } else if bb.is_empty() {
            (numel(ba), false, true, ba.to_vec())
        } else if ba.is_empty() {
            (numel(bb), true, false, bb.to_vec())
        } else {
            return Err(shape_err("matmul", sa, sb));
        };
        let mut out = bshape;
        out.push(m);
        out.push(n);
        Ok((batch, m, k, n, a_bc, b_bc, out))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n, a_bc, b_bc, out_shape) =
            Self::matmul_dims(&self.nodes[a.0].shape, &self.nodes[b.0].shape, trans_b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![R::ZERO; batch * m * n];
        for bi in 0..batch {
            let ao = if a_bc { 0 } else { bi * m * k };
            let bo = if b_bc { 0 } else { bi * k * n };
            let c = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                mm_nt(&av[ao..ao + m * k], &bv[bo..bo + k * n], c, m, k, n);
            } else {
                mm_nn(&av[ao..ao + m * k], &bv[bo..bo + k * n], c, m, k, n);
            }
        }
        self.push_owned(out, out_shape, Op::MatMul { a: a.0, b: b.0, trans_b }, &[a.0, b.0])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(R, R) -> R, op: Op) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![R::ZERO; numel(&out_shape)];
        for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(av[i], bv[j]));
        self.push_owned(out, out_shape, op, &[a.0, b.0])
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let sr = R::of(s);
        let out: Vec<R> = self.nodes[a.0].value.iter().map(|&v| v * sr).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_owned(out, shape, Op::Scale { a: a.0, s }, &[a.0])
    }

    fn unary(&mut self, a: Var, f: impl Fn(R) -> R, op: Op) -> Result<Var> {
        let out: Vec<R> = self.nodes[a.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_owned(out, shape, op, &[a.0])
    }

    /// `min(max(x, 0), 6)`; the subgradient at both kinks is 0.
    pub fn relu6(&mut self, a: Var) -> Result<Var> {
        let six = R::of(6.0);
        self.unary(a, |v| v.max(R::ZERO).min(six), Op::Relu6 { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, stable_sigmoid, Op::Sigmoid { a: a.0 })
    }

    /// `(x + eps)^(-1/2)`
    pub fn rsqrt_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        if self.nodes[a.0].value.iter().any(|v| v.as_f64() + eps <= 0.0) {
            return Err(Error::invalid("rsqrt of non-positive value"));
        }
        let e = R::of(eps);
        self.unary(a, |v| R::ONE / (v + e).sqrt(), Op::RsqrtEps { a: a.0 })
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the closed range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (R::of(lo), R::of(hi));
        self.unary(a, |v| v.max(l).min(h), Op::Clamp { a: a.0, lo, hi })
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all elements (accumulated in `f64`), shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.iter().map(|v| v.as_f64()).sum();
        self.push_owned(vec![R::of(s)], vec![1], Op::SumAll { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum_axis: axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = &self.nodes[a.0].value;
        let mut out = vec![R::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for l in 0..len {
                    acc += v[(o * len + l) * inner + i].as_f64();
                }
                out[o * inner + i] = R::of(acc);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        self.push_owned(out, out_shape, Op::SumAxis { a: a.0, axis }, &[a.0])
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along `axis`, max-subtracted, with an `f64` denominator.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax: axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = &self.nodes[a.0].value;
        let mut out = vec![R::ZERO; v.len()];
        let mut buf = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| v[at(l)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = (v[at(l)].as_f64() - m).exp();
                    s += *b;
                }
                for (l, b) in buf.iter().enumerate() {
                    out[at(l)] = R::of(b / s);
                }
            }
        }
        self.push_owned(out, shape, Op::Softmax { a: a.0, axis }, &[a.0])
    }

    /// Softmax over the last axis where dropped entries behave as logits of
    /// −1e9. Rows with every entry dropped produce zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if !shape.ends_with(&mask.shape) {
            return Err(shape_err("masked_softmax", &shape, &mask.shape));
        }
        let len = *shape.last().unwrap();
        let mn = mask.keep.len();
        let v = &self.nodes[a.0].value;
        let mut out = vec![R::ZERO; v.len()];
        let rows = v.len() / len;
        let mut buf = vec![0.0f64; len];
        for r in 0..rows {
            let base = r * len;
            let keep = |l: usize| mask.keep[(base + l) % mn];
            let mut m = f64::NEG_INFINITY;
            for l in 0..len {
                if keep(l) {
                    m = m.max(v[base + l].as_f64());
                }
            }
            if m == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for (l, b) in buf.iter_mut().enumerate() {
                *b = if keep(l) { (v[base + l].as_f64() - m).exp() } else { 0.0 };
                s += *b;
            }
            for (l, b) in buf.iter().enumerate() {
                out[base + l] = R::of(b / s);
            }
        }
        self.push_owned(out, shape, Op::Softmax { a: a.0, axis: usize::MAX }, &[a.0])
    }

    /// Layer normalization over the last dim (biased variance, `f64` stats).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap();
        for p in [gain, bias] {
            if self.nodes[p.0].shape != [d] {
                return Err(shape_err("layer_norm", &shape, &self.nodes[p.0].shape));
            }
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let rows = xv.len() / d;
        let mut out = vec![R::ZERO; xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j].as_f64() - mean) * rstd;
                out[r * d + j] = R::of(xh * gv[j].as_f64() + bv[j].as_f64());
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push_owned(
            out,
            shape,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                mean: means,
                rstd: rstds,
            },
            &[x.0, gain.0, bias.0],
        )
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(shape_err("reshape", &self.nodes[a.0].shape, shape));
        }
        let v = self.nodes[a.0].value.to_vec();
        self.push_owned(v, shape.to_vec(), Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Reorders dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("permute: {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(&self.nodes[a.0].value, &shape, perm);
        self.push_owned(out, out_shape, Op::Permute { a: a.0, perm: perm.to_vec() }, &[a.0])
    }

    /// Columns `start..start+len` of the last dim.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().unwrap();
        if len == 0 || start + len > d {
            return Err(Error::Index {
                op: "slice_last",
                index: start + len,
                size: d,
            });
        }
        let v = &self.nodes[a.0].value;
        let rows = v.len() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * d + start..r * d + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.push_owned(out, out_shape, Op::SliceLast { a: a.0, start }, &[a.0])
    }

    // ---- indexing -------------------------------------------------------

    /// Gathers rows `ids` of `table[V,D]`; backward scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(shape_err("embedding_lookup", &shape, &[0, 0]));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding_lookup: empty id list"));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                op: "embedding_lookup",
                index: bad,
                size: v,
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push_owned(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        )
    }

    /// Linear interpolation of rows of `seq[T,D]` at fractional positions
    /// `pos[Q]`, clamped to `[0, T-1]`.
    pub fn interp_gather(&mut self, seq: Var, pos: Var) -> Result<Var> {
        let shape = self.nodes[seq.0].shape.clone();
        if shape.len() != 2 {
            return Err(shape_err("interp_gather", &shape, &[0, 0]));
        }
        if self.nodes[pos.0].shape.len() != 1 {
            return Err(shape_err("interp_gather", &shape, &self.nodes[pos.0].shape));
        }
        let (t, d) = (shape[0], shape[1]);
        let sv = &self.nodes[seq.0].value;
        let pv = &self.nodes[pos.0].value;
        let mut out = Vec::with_capacity(pv.len() * d);
        for &p in pv.iter() {
            let p = p.as_f64().clamp(0.0, (t - 1) as f64);
            let (fl, ce, z) = interp_coords(p, t);
            let (w0, w1) = (R::of(1.0 - z), R::of(z));
            for j in 0..d {
                out.push(w0 * sv[fl * d + j] + w1 * sv[ce * d + j]);
            }
        }
        let q = pv.len();
        self.push_owned(out, vec![q, d], Op::InterpGather { seq: seq.0, pos: pos.0 }, &[seq.0, pos.0])
    }

    /// Deformable temporal sampling.
    ///
    /// For every head `h`, frame `i` and sample `s`, interpolates the head's
    /// channel slice of `x[T,D]` at `clamp(i + offsets[h,s], 0, valid_len-1)`.
    /// Samples are emitted in ascending offset order per head. Output shape
    /// `[H, T, S, D/H]`.
    pub fn deform_sample(&mut self, x: Var, offsets: Var, heads: usize, valid_len: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let os = self.nodes[offsets.0].shape.clone();
        if xs.len() != 2 || os.len() != 2 || os[0] != heads || heads == 0 || !xs[1].is_multiple_of(heads) {
            return Err(shape_err("deform_sample", &xs, &os));
        }
        let (t, d) = (xs[0], xs[1]);
        if valid_len == 0 || valid_len > t {
            return Err(Error::Index {
                op: "deform_sample",
                index: valid_len,
                size: t,
            });
        }
        let s = os[1];
        let dh = d / heads;
        let xv = &self.nodes[x.0].value;
        let ov = &self.nodes[offsets.0].value;
        let order: Vec<Vec<usize>> = (0..heads)
            .map(|h| {
                let mut idx: Vec<usize> = (0..s).collect();
                idx.sort_by(|&a, &b| {
                    ov[h * s + a]
                        .partial_cmp(&ov[h * s + b])
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                idx
            })
            .collect();
        let hi = (valid_len - 1) as f64;
        let mut out = vec![R::ZERO; heads * t * s * dh];
        for h in 0..heads {
            for i in 0..t {
                for (slot, &k) in order[h].iter().enumerate() {
                    let p = (i as f64 + ov[h * s + k].as_f64()).clamp(0.0, hi);
                    let (fl, ce, z) = interp_coords(p, valid_len);
                    let (w0, w1) = (R::of(1.0 - z), R::of(z));
                    let base = ((h * t + i) * s + slot) * dh;
                    for j in 0..dh {
                        let c = h * dh + j;
                        out[base + j] = w0 * xv[fl * d + c] + w1 * xv[ce * d + c];
                    }
                }
            }
        }
        self.push_owned(
            out,
            vec![heads, t, s, dh],
            Op::DeformSample {
                x: x.0,
                offsets: offsets.0,
                heads,
                valid_len,
                order,
            },
            &[x.0, offsets.0],
        )
    }

    /// Interpolated lookup into a per-row table of integer-position logits.
    ///
    /// `table[.., P+1]` holds one row per query; `pos[.., Tk]` holds
    /// fractional positions in `[0, P]` for the same rows.
    pub fn cope_interp(&mut self, table: Var, pos: Var) -> Result<Var> {
        let ts = self.nodes[table.0].shape.clone();
        let ps = self.nodes[pos.0].shape.clone();
        if ts.len() != ps.len() || ts[..ts.len() - 1] != ps[..ps.len() - 1] {
            return Err(shape_err("cope_interp", &ts, &ps));
        }
        let p1 = *ts.last().unwrap();
        let tk = *ps.last().unwrap();
        let tv = &self.nodes[table.0].value;
        let pv = &self.nodes[pos.0].value;
        let rows = pv.len() / tk;
        let mut out = vec![R::ZERO; pv.len()];
        for r in 0..rows {
            for j in 0..tk {
                let p = pv[r * tk + j].as_f64();
                if !(0.0..=(p1 - 1) as f64).contains(&p) {
                    return Err(Error::invalid(format!(
                        "cope_interp: position {p} outside [0, {}]",
                        p1 - 1
                    )));
                }
                let (fl, ce, z) = interp_coords(p, p1);
                out[r * tk + j] = R::of(1.0 - z) * tv[r * p1 + fl] + R::of(z) * tv[r * p1 + ce];
            }
        }
        self.push_owned(out, ps, Op::CopeInterp { table: table.0, pos: pos.0 }, &[table.0, pos.0])
    }

    /// Cumulative sum along the last axis; `reverse` accumulates from the end.
    pub fn cumsum(&mut self, a: Var, reverse: bool) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let len = *shape.last().unwrap();
        let v = &self.nodes[a.0].value;
        let mut out = vec![R::ZERO; v.len()];
        cumsum_rows(v, &mut out, len, reverse);
        self.push_owned(out, shape, Op::Cumsum { a: a.0, reverse }, &[a.0])
    }

    // ---- convolution ----------------------------------------------------

    /// Per-channel temporal convolution with same-length zero padding.
    ///
    /// `x[T,C]`, `w[C,K]` (K odd), `b[C]`. Frames where `pad_mask` is 0 are
    /// zeroed on the input and on the output.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, b: Var, pad_mask: &[bool]) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || self.nodes[b.0].shape != [xs[1]] {
            return Err(shape_err("conv1d_depthwise", &xs, &ws));
        }
        if pad_mask.len() != xs[0] {
            return Err(shape_err("conv1d_depthwise", &xs, &[pad_mask.len()]));
        }
        let k = ws[1];
        if k.is_multiple_of(2) {
            return Err(Error::config("kernel_K", format!("depthwise kernel must be odd, got {k}")));
        }
        let (t, c) = (xs[0], xs[1]);
        let pad = (k - 1) / 2;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![R::ZERO; t * c];
        for ti in 0..t {
            if !pad_mask[ti] {
                continue;
            }
            let row = &mut out[ti * c..(ti + 1) * c];
            row.copy_from_slice(bv);
            for kk in 0..k {
                let src = ti as isize + kk as isize - pad as isize;
                if src < 0 || src >= t as isize || !pad_mask[src as usize] {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    row[ch] += wv[ch * k + kk] * xv[src * c + ch];
                }
            }
        }
        self.push_owned(
            out,
            xs,
            Op::DepthwiseConv {
                x: x.0,
                w: w.0,
                b: b.0,
                mask: pad_mask.to_vec(),
            },
            &[x.0, w.0, b.0],
        )
    }

    // ---- loss -----------------------------------------------------------

    /// Mean label-smoothed negative log-likelihood over rows whose target is
    /// not `pad`. Smoothing mass is spread uniformly over the vocabulary.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize, smoothing: f64) -> Result<Var> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: v,
            });
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every target is padding"));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0f64; lv.len()];
        let mut total = 0.0f64;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt == pad {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
            let mut smooth = 0.0;
            for (j, x) in row.iter().enumerate() {
                let lp = x.as_f64() - lse;
                probs[r * v + j] = lp.exp();
                smooth += lp;
            }
            let nll = -(row[tgt].as_f64() - lse);
            total += (1.0 - smoothing) * nll - smoothing / v as f64 * smooth;
        }
        let loss = total / count as f64;
        self.push_owned(
            vec![R::of(loss)],
            vec![1],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                pad,
                smoothing,
                probs,
                count,
            },
            &[logits.0],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<R>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<R>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![R::ONE]);
        }
        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(f) = node.op.fault() {
                let k = fault::factor(f);
                if k != 1.0 {
                    let k = R::of(k);
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
            backward_node(&nodes, &mut grads, id, &g);
            if matches!(node.op, Op::Leaf) {
                leaves.insert(id, g);
            }
        }
        Ok(Gradients { leaves })
    }
}

#[inline]
fn stable_sigmoid<R: Real>(v: R) -> R {
    let x = v.as_f64();
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    R::of(y)
}

fn cumsum_rows<R: Real>(v: &[R], out: &mut [R], len: usize, reverse: bool) {
    for (src, dst) in v.chunks(len).zip(out.chunks_mut(len)) {
        let mut acc = 0.0f64;
        if reverse {
            for j in (0..len).rev() {
                acc += src[j].as_f64();
                dst[j] = R::of(acc);
            }
        } else {
            for j in 0..len {
                acc += src[j].as_f64();
                dst[j] = R::of(acc);
            }
        }
    }
}

fn permute_data<R: Real>(v: &[R], shape: &[usize], perm: &[usize]) -> Vec<R> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = v.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut si = 0usize;
    for _ in 0..n {
        out.push(v[si]);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            si += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            si -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Returns the gradient buffer of `id`, or `None` if it needs no gradient.
fn slot<'g, R: Real>(grads: &'g mut [Option<Vec<R>>], nodes: &[Node<'_, R>], id: usize) -> Option<&'g mut Vec<R>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![R::ZERO; nodes[id].value.len()]))
}

/// Reduces a broadcast gradient back onto an operand's shape.
fn reduce_bcast<R: Real>(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    g: &[R],
    dst: &mut [R],
    which_a: bool,
    scale: impl Fn(usize, usize, usize) -> R,
) {
    for_each_bcast(out_shape, a_shape, b_shape, |o, i, j| {
        let k = if which_a { i } else { j };
        dst[k] += g[o] * scale(o, i, j);
    });
}

fn backward_node<R: Real>(nodes: &[Node<'_, R>], grads: &mut [Option<Vec<R>>], id: usize, g: &[R]) {
    let node = &nodes[id];
    let val = |i: usize| -> &[R] { &nodes[i].value };
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul { a, b, trans_b } => {
            let (a, b, trans_b) = (*a, *b, *trans_b);
            let (batch, m, k, n, a_bc, b_bc, _) =
                Tape::<R>::matmul_dims(&nodes[a].shape, &nodes[b].shape, trans_b).expect("validated in forward");
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(grads, nodes, a) {
                for bi in 0..batch {
                    let ao = if a_bc { 0 } else { bi * m * k };
                    let bo = if b_bc { 0 } else { bi * k * n };
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut ga[ao..ao + m * k];
                    if trans_b {
                        mm_nn(gc, &bv[bo..bo + k * n], dst, m, n, k);
                    } else {
                        mm_nt(gc, &bv[bo..bo + k * n], dst, m, n, k);
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for bi in 0..batch {
                    let ao = if a_bc { 0 } else { bi * m * k };
                    let bo = if b_bc { 0 } else { bi * k * n };
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut gb[bo..bo + k * n];
                    if trans_b {
                        // dB[n,k] = dCᵀ[n,m] · A[m,k]
                        mm_tn(gc, &av[ao..ao + m * k], dst, m, n, k);
                    } else {
                        // dB[k,n] = Aᵀ[k,m] · dC[m,n]
                        mm_tn(&av[ao..ao + m * k], gc, dst, m, k, n);
                    }
                }
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            let neg = matches!(node.op, Op::Sub { .. });
            let (sa, sb) = (nodes[a].shape.clone(), nodes[b].shape.clone());
            if let Some(ga) = slot(grads, nodes, a) {
                reduce_bcast(&node.shape, &sa, &sb, g, ga, true, |_, _, _| R::ONE);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                let s = if neg { -R::ONE } else { R::ONE };
                reduce_bcast(&node.shape, &sa, &sb, g, gb, false, |_, _, _| s);
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let (sa, sb) = (nodes[a].shape.clone(), nodes[b].shape.clone());
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(grads, nodes, a) {
                reduce_bcast(&node.shape, &sa, &sb, g, ga, true, |_, _, j| bv[j]);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                reduce_bcast(&node.shape, &sa, &sb, g, gb, false, |_, i, _| av[i]);
            }
        }
        Op::Scale { a, s } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let s = R::of(*s);
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += gv * s;
                }
            }
        }
        Op::Relu6 { a } => {
            let xv = val(*a);
            let six = R::of(6.0);
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(xv.iter()) {
                    if x > R::ZERO && x < six {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            let yv = &node.value;
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(yv.iter()) {
                    *d += gv * y * (R::ONE - y);
                }
            }
        }
        Op::RsqrtEps { a, .. } => {
            let yv = &node.value;
            if let Some(ga) = slot(grads, nodes, *a) {
                let half = R::of(-0.5);
                for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(yv.iter()) {
                    *d += gv * half * y * y * y;
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let xv = val(*a);
            let (l, h) = (R::of(*lo), R::of(*hi));
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(xv.iter()) {
                    if x >= l && x <= h {
                        *d += gv;
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let g0 = g[0];
                ga.iter_mut().for_each(|d| *d += g0);
            }
        }
        Op::SumAxis { a, axis } => {
            let (outer, len, inner) = split_axis(&nodes[*a].shape, *axis);
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            let yv = &node.value;
            let shape = &node.shape;
            let (outer, len, inner) = if *axis == usize::MAX {
                let len = *shape.last().unwrap();
                (yv.len() / len, len, 1)
            } else {
                split_axis(shape, *axis)
            };
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)].as_f64() * yv[at(l)].as_f64()).sum();
                        for l in 0..len {
                            let y = yv[at(l)].as_f64();
                            ga[at(l)] += R::of(y * (g[at(l)].as_f64() - dot));
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let xv = val(x);
            let gv = val(gain);
            let d = gv.len();
            let rows = xv.len() / d;
            let xhat = |r: usize, j: usize| (xv[r * d + j].as_f64() - mean[r]) * rstd[r];
            if let Some(gb) = slot(grads, nodes, bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += R::of(g[r * d + j].as_f64() * xhat(r, j));
                    }
                }
            }
            if let Some(gx) = slot(grads, nodes, x) {
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = g[r * d + j].as_f64() * gv[j].as_f64();
                        m1 += dxh;
                        m2 += dxh * xhat(r, j);
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = g[r * d + j].as_f64() * gv[j].as_f64();
                        gx[r * d + j] += R::of(rstd[r] * (dxh - m1 - xhat(r, j) * m2));
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Permute { a, perm } => {
            let inv = inverse_perm(perm);
            let back = permute_data(g, &node.shape, &inv);
            if let Some(ga) = slot(grads, nodes, *a) {
                for (d, v) in ga.iter_mut().zip(back) {
                    *d += v;
                }
            }
        }
        Op::SliceLast { a, start } => {
            let d = *nodes[*a].shape.last().unwrap();
            let len = *node.shape.last().unwrap();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (r, gr) in g.chunks(len).enumerate() {
                    for (j, &gv) in gr.iter().enumerate() {
                        ga[r * d + start + j] += gv;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].shape[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::InterpGather { seq, pos } => {
            let (seq, pos) = (*seq, *pos);
            let (t, d) = (nodes[seq].shape[0], nodes[seq].shape[1]);
            let sv = val(seq);
            let pv = val(pos);
            if let Some(gs) = slot(grads, nodes, seq) {
                for (q, &p) in pv.iter().enumerate() {
                    let (fl, ce, z) = interp_coords(p.as_f64().clamp(0.0, (t - 1) as f64), t);
                    let (w0, w1) = (R::of(1.0 - z), R::of(z));
                    for j in 0..d {
                        gs[fl * d + j] += w0 * g[q * d + j];
                        gs[ce * d + j] += w1 * g[q * d + j];
                    }
                }
            }
            if let Some(gp) = slot(grads, nodes, pos) {
                for (q, &p) in pv.iter().enumerate() {
                    let p = p.as_f64();
                    if p < 0.0 || p > (t - 1) as f64 {
                        continue;
                    }
                    let fl = p.floor() as usize;
                    if fl + 1 >= t {
                        continue;
                    }
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += g[q * d + j].as_f64() * (sv[(fl + 1) * d + j].as_f64() - sv[fl * d + j].as_f64());
                    }
                    gp[q] += R::of(acc);
                }
            }
        }
        Op::DeformSample {
            x,
            offsets,
            heads,
            valid_len,
            order,
        } => {
            let (x, offsets, heads, vl) = (*x, *offsets, *heads, *valid_len);
            let (t, d) = (nodes[x].shape[0], nodes[x].shape[1]);
            let s = nodes[offsets].shape[1];
            let dh = d / heads;
            let xv = val(x);
            let ov = val(offsets);
            let hi = (vl - 1) as f64;
            if let Some(gx) = slot(grads, nodes, x) {
                for h in 0..heads {
                    for i in 0..t {
                        for (slot_i, &k) in order[h].iter().enumerate() {
                            let p = (i as f64 + ov[h * s + k].as_f64()).clamp(0.0, hi);
                            let (fl, ce, z) = interp_coords(p, vl);
                            let (w0, w1) = (R::of(1.0 - z), R::of(z));
                            let base = ((h * t + i) * s + slot_i) * dh;
                            for j in 0..dh {
                                let c = h * dh + j;
                                gx[fl * d + c] += w0 * g[base + j];
                                gx[ce * d + c] += w1 * g[base + j];
                            }
                        }
                    }
                }
            }
            if let Some(go) = slot(grads, nodes, offsets) {
                for h in 0..heads {
                    for i in 0..t {
                        for (slot_i, &k) in order[h].iter().enumerate() {
                            let p = i as f64 + ov[h * s + k].as_f64();
                            if p < 0.0 || p > hi {
                                continue;
                            }
                            let fl = p.floor() as usize;
                            if fl + 1 >= vl {
                                continue;
                            }
                            let base = ((h * t + i) * s + slot_i) * dh;
                            let mut acc = 0.0;
                            for j in 0..dh {
                                let c = h * dh + j;
                                acc += g[base + j].as_f64() * (xv[(fl + 1) * d + c].as_f64() - xv[fl * d + c].as_f64());
                            }
                            go[h * s + k] += R::of(acc);
                        }
                    }
                }
            }
        }
        Op::CopeInterp { table, pos } => {
            let (table, pos) = (*table, *pos);
            let p1 = *nodes[table].shape.last().unwrap();
            let tk = *nodes[pos].shape.last().unwrap();
            let tv = val(table);
            let pv = val(pos);
            let rows = pv.len() / tk;
            if let Some(gt) = slot(grads, nodes, table) {
                for r in 0..rows {
                    for j in 0..tk {
                        let (fl, ce, z) = interp_coords(pv[r * tk + j].as_f64(), p1);
                        let gv = g[r * tk + j];
                        gt[r * p1 + fl] += R::of(1.0 - z) * gv;
                        gt[r * p1 + ce] += R::of(z) * gv;
                    }
                }
            }
            if let Some(gp) = slot(grads, nodes, pos) {
                for r in 0..rows {
                    for j in 0..tk {
                        let fl = pv[r * tk + j].as_f64().floor() as usize;
                        if fl + 1 >= p1 {
                            continue;
                        }
                        gp[r * tk + j] += g[r * tk + j] * (tv[r * p1 + fl + 1] - tv[r * p1 + fl]);
                    }
                }
            }
        }
        Op::Cumsum { a, reverse } => {
            let len = *node.shape.last().unwrap();
            if let Some(ga) = slot(grads, nodes, *a) {
                let mut back = vec![R::ZERO; g.len()];
                cumsum_rows(g, &mut back, len, !reverse);
                for (d, v) in ga.iter_mut().zip(back) {
                    *d += v;
                }
            }
        }
        Op::DepthwiseConv { x, w, b, mask } => {
            let (x, w, b) = (*x, *w, *b);
            let (t, c) = (nodes[x].shape[0], nodes[x].shape[1]);
            let k = nodes[w].shape[1];
            let pad = (k - 1) / 2;
            let xv = val(x);
            let wv = val(w);
            let taps = |ti: usize, kk: usize| -> Option<usize> {
                let src = ti as isize + kk as isize - pad as isize;
                if src < 0 || src >= t as isize || !mask[src as usize] {
                    None
                } else {
                    Some(src as usize)
                }
            };
            if let Some(gb) = slot(grads, nodes, b) {
                for ti in (0..t).filter(|&ti| mask[ti]) {
                    for ch in 0..c {
                        gb[ch] += g[ti * c + ch];
                    }
                }
            }
            if let Some(gw) = slot(grads, nodes, w) {
                for ti in (0..t).filter(|&ti| mask[ti]) {
                    for kk in 0..k {
                        if let Some(src) = taps(ti, kk) {
                            for ch in 0..c {
                                gw[ch * k + kk] += g[ti * c + ch] * xv[src * c + ch];
                            }
                        }
                    }
                }
            }
            if let Some(gx) = slot(grads, nodes, x) {
                for ti in (0..t).filter(|&ti| mask[ti]) {
                    for kk in 0..k {
                        if let Some(src) = taps(ti, kk) {
                            for ch in 0..c {
                                gx[src * c + ch] += g[ti * c + ch] * wv[ch * k + kk];
                            }
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad,
            smoothing,
            probs,
            count,
        } => {
            let v = nodes[*logits].shape[1];
            let scale = g[0].as_f64() / *count as f64;
            let uniform = smoothing / v as f64;
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, &tgt) in targets.iter().enumerate() {
                    if tgt == *pad {
                        continue;
                    }
                    for j in 0..v {
                        let mut q = uniform;
                        if j == tgt {
                            q += 1.0 - smoothing;
                        }
                        gl[r * v + j] += R::of(scale * (probs[r * v + j] - q));
                    }
                }
            }
        }
    }
}
