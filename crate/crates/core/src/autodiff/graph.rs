use std::collections::HashMap;

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Fill value for masked attention scores. Finite so that downstream
/// arithmetic never produces NaN; `exp` of it underflows to exactly zero.
pub const MASK_FILL: f64 = -1e9;

/// Lower clamp applied to the argument of [`Op::Log`].
pub const LOG_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Opcode plus attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `a + b`; `b` may have a shape equal to a suffix of `a`'s (broadcast).
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    MatMul,
    TransposeLastTwo,
    Reshape(Vec<usize>),
    ConcatLast,
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Rows of the operand matrix `[rows, d]` selected by `ids`; the output
    /// has shape `batch_shape ++ [d]`.
    Embedding {
        ids: Vec<usize>,
        batch_shape: Vec<usize>,
    },
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Gelu,
    /// Operands: input, gain, bias. Normalizes over the last axis.
    LayerNorm { eps: f64 },
    /// Operand `[..., t, t]` of attention scores. Entries above the diagonal
    /// are replaced with [`MASK_FILL`]; when `key_pad` is given (one flag
    /// per leading row and key position) padded keys are masked too,
    /// except on the diagonal.
    CausalMask { key_pad: Option<Vec<bool>> },
    Sum,
    Mean,
    /// Flat element offsets into the operand; output is 1-D.
    GatherAt { offsets: Vec<usize> },
    /// `log(1 - exp(min(x, max)))`, evaluated stably.
    Log1mExp { max: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::TransposeLastTwo => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatLast => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Gelu => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalMask { .. } => "causal_mask",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::GatherAt { .. } => "gather",
            Op::Log1mExp { .. } => "log1mexp",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<(Op, Vec<NodeId>)>,
    requires_grad: bool,
}

/// Tape of eagerly evaluated nodes. Creation order is a topological order.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss, keyed by leaf node.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap<T = f32> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor<T>)> {
        self.grads.iter()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last.max(1), last)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` receive entries in the
    /// [`GradMap`] returned by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, None, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<(Op, Vec<NodeId>)>, rg: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it on the tape.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Index {
                op: op.name(),
                index: bad.0,
                limit: self.nodes.len(),
            });
        }
        let arity = match op {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => Some(2),
            Op::LayerNorm { .. } => Some(3),
            Op::ConcatLast => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::Invalid(format!(
                    "{} expects {n} operands, got {}",
                    op.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::Invalid("concat expects at least one operand".into()));
        }
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            forward(&op, &vals)?
        };
        let rg = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(value, Some((op, inputs.to_vec())), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::TransposeLastTwo, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatLast, parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], batch_shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Op::Embedding {
                ids: ids.to_vec(),
                batch_shape: batch_shape.to_vec(),
            },
            &[table],
        )
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }
    pub fn causal_mask(&mut self, a: NodeId, key_pad: Option<Vec<bool>>) -> Result<NodeId> {
        self.apply(Op::CausalMask { key_pad }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }
    pub fn gather(&mut self, a: NodeId, offsets: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::GatherAt { offsets }, &[a])
    }
    pub fn log1mexp(&mut self, a: NodeId, max: f64) -> Result<NodeId> {
        self.apply(Op::Log1mExp { max }, &[a])
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Every leaf created with `requires_grad` gets an entry; leaves the
    /// loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let Some((op, inputs)) = &node.op else {
                out.insert(
                    NodeId(idx),
                    Tensor::from_parts(node.value.shape().to_vec(), g),
                );
                continue;
            };
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let need: Vec<bool> = inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let input_grads = backward_op(op, &vals, &node.value, &g, &need);
            for ((id, ig), needed) in inputs.iter().zip(input_grads).zip(need) {
                let Some(ig) = ig else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                out.entry(NodeId(idx))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradMap { grads: out })
    }
}

fn softmax_rows<T: Real>(x: &[T], last: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(last).zip(out.chunks_mut(last)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            z = z + *oi;
        }
        o.iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

fn log1mexp<T: Real>(a: T) -> T {
    // ln(1 - e^a) for a < 0
    if a > -T::cst(std::f64::consts::LN_2) {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::cst(GELU_C);
    let a = T::cst(GELU_A);
    let half = T::cst(0.5);
    let u = c * (x + a * x * x * x);
    // tanh via one exp; libm tanh is several times slower
    let t = T::one() - T::cst(2.0) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::cst(3.0) * a * x * x);
    (y, dy)
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1])),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2])),
        _ => Err(shape_err(op, &[a, b])),
    }
}

fn forward<T: Real>(op: &Op, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let name = op.name();
    let out = match op {
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (x[0], x[1]);
            if !is_suffix(a.shape(), b.shape()) {
                return Err(shape_err(name, &[a.shape(), b.shape()]));
            }
            let nb = b.numel();
            let f = |p: T, q: T| match op {
                Op::Add => p + q,
                Op::Sub => p - q,
                _ => p * q,
            };
            let data = a
                .data()
                .chunks(nb)
                .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&p, &q)| f(p, q)))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Scale(c) => {
            let c = T::cst(*c);
            Tensor::from_parts(x[0].shape().to_vec(), x[0].data().iter().map(|&v| v * c).collect())
        }
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (batch, m, k, n) = matmul_dims(name, a.shape(), b.shape())?;
            let mut c = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let shape = if a.shape().len() == 2 { vec![m, n] } else { vec![batch, m, n] };
            Tensor::from_parts(shape, c)
        }
        Op::TransposeLastTwo => {
            let s = x[0].shape();
            if s.len() < 2 {
                return Err(shape_err(name, &[s]));
            }
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let mut shape = s.to_vec();
            let r = shape.len();
            shape.swap(r - 2, r - 1);
            Tensor::from_parts(shape, transpose_blocks(x[0].data(), m, n))
        }
        Op::Reshape(shape) => {
            let numel: usize = shape.iter().product();
            if numel != x[0].numel() || shape.iter().any(|&d| d == 0) {
                return Err(shape_err(name, &[x[0].shape(), shape]));
            }
            Tensor::from_parts(shape.clone(), x[0].data().to_vec())
        }
        Op::ConcatLast => {
            let first = x[0].shape();
            let lead = &first[..first.len() - 1];
            for t in x {
                let s = t.shape();
                if s.len() != first.len() || &s[..s.len() - 1] != lead {
                    return Err(shape_err(name, &x.iter().map(|t| t.shape()).collect::<Vec<_>>()));
                }
            }
            let rows = lead.iter().product::<usize>();
            let total: usize = x.iter().map(|t| *t.shape().last().unwrap()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in x {
                    let w = *t.shape().last().unwrap();
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, data)
        }
        Op::Slice { axis, start, end } => {
            let s = x[0].shape();
            if *axis >= s.len() || start >= end || *end > s[*axis] {
                return Err(shape_err(name, &[s, &[*axis, *start, *end]]));
            }
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let dim = s[*axis];
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                data.extend_from_slice(&x[0].data()[base + start * inner..base + end * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = end - start;
            Tensor::from_parts(shape, data)
        }
        Op::Embedding { ids, batch_shape } => {
            let t = x[0];
            if t.shape().len() != 2 || batch_shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
                return Err(shape_err(name, &[t.shape(), batch_shape, &[ids.len()]]));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= rows {
                    return Err(Error::Index { op: name, index: id, limit: rows });
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            let mut shape = batch_shape.clone();
            shape.push(d);
            Tensor::from_parts(shape, data)
        }
        Op::Softmax => {
            let (_, last) = split_last(x[0].shape());
            Tensor::from_parts(x[0].shape().to_vec(), softmax_rows(x[0].data(), last))
        }
        Op::LogSoftmax => {
            let (_, last) = split_last(x[0].shape());
            let mut out = vec![T::zero(); x[0].numel()];
            for (row, o) in x[0].data().chunks(last).zip(out.chunks_mut(last)) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + z.ln();
                o.iter_mut().zip(row).for_each(|(oi, &v)| *oi = v - lse);
            }
            Tensor::from_parts(x[0].shape().to_vec(), out)
        }
        Op::Log => {
            let floor = T::cst(LOG_FLOOR);
            map(x[0], |v| v.max(floor).ln())
        }
        Op::Exp => map(x[0], |v| v.exp()),
        Op::Gelu => map(x[0], |v| gelu_parts(v).0),
        Op::LayerNorm { eps } => {
            let (inp, gain, bias) = (x[0], x[1], x[2]);
            let (_, d) = split_last(inp.shape());
            if gain.shape() != [d] || bias.shape() != [d] {
                return Err(shape_err(name, &[inp.shape(), gain.shape(), bias.shape()]));
            }
            let mut out = vec![T::zero(); inp.numel()];
            for (row, o) in inp.data().chunks(d).zip(out.chunks_mut(d)) {
                let (mu, rstd) = moments(row, *eps);
                for j in 0..d {
                    o[j] = (row[j] - mu) * rstd * gain.data()[j] + bias.data()[j];
                }
            }
            Tensor::from_parts(inp.shape().to_vec(), out)
        }
        Op::CausalMask { key_pad } => {
            let s = x[0].shape();
            if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(shape_err(name, &[s]));
            }
            let t = s[s.len() - 1];
            let lead = x[0].numel() / (t * t);
            if let Some(pad) = key_pad {
                if pad.len() != lead * t {
                    return Err(shape_err(name, &[s, &[pad.len()]]));
                }
            }
            let fill = T::cst(MASK_FILL);
            let mut data = x[0].data().to_vec();
            for b in 0..lead {
                for i in 0..t {
                    for j in 0..t {
                        if mask_at(key_pad.as_deref(), b, t, i, j) {
                            data[(b * t + i) * t + j] = fill;
                        }
                    }
                }
            }
            Tensor::from_parts(s.to_vec(), data)
        }
        Op::Sum => Tensor::scalar(x[0].data().iter().copied().sum()),
        Op::Mean => {
            let n = T::cst(x[0].numel() as f64);
            Tensor::scalar(x[0].data().iter().copied().sum::<T>() / n)
        }
        Op::GatherAt { offsets } => {
            if offsets.is_empty() {
                return Err(shape_err(name, &[x[0].shape(), &[0]]));
            }
            let mut data = Vec::with_capacity(offsets.len());
            for &o in offsets {
                if o >= x[0].numel() {
                    return Err(Error::Index { op: name, index: o, limit: x[0].numel() });
                }
                data.push(x[0].data()[o]);
            }
            Tensor::from_parts(vec![offsets.len()], data)
        }
        Op::Log1mExp { max } => {
            let max = T::cst(*max);
            map(x[0], |v| log1mexp(v.min(max)))
        }
    };
    Ok(out)
}

fn mask_at(key_pad: Option<&[bool]>, b: usize, t: usize, i: usize, j: usize) -> bool {
    j > i || (j != i && key_pad.is_some_and(|p| p[b * t + j]))
}

fn moments<T: Real>(row: &[T], eps: f64) -> (T, T) {
    let d = T::cst(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / d;
    (mu, (var + T::cst(eps)).sqrt().recip())
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn transpose_blocks<T: Real>(data: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Vector-Jacobian products. Returns one entry per operand; `None` where
/// the operand does not need a gradient.
fn backward_op<T: Real>(
    op: &Op,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    g: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (x[0], x[1]);
            let nb = b.numel();
            let ga = need[0].then(|| match op {
                Op::Mul => g
                    .chunks(nb)
                    .flat_map(|c| c.iter().zip(b.data()).map(|(&gi, &bi)| gi * bi))
                    .collect(),
                _ => g.to_vec(),
            });
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); nb];
                for (ci, c) in g.chunks(nb).enumerate() {
                    for (j, &gi) in c.iter().enumerate() {
                        acc[j] = acc[j]
                            + match op {
                                Op::Add => gi,
                                Op::Sub => -gi,
                                _ => gi * a.data()[ci * nb + j],
                            };
                    }
                }
                acc
            });
            vec![ga, gb]
        }
        Op::Scale(c) => {
            let c = T::cst(*c);
            vec![Some(g.iter().map(|&v| v * c).collect())]
        }
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (batch, m, k, n) = matmul_dims("matmul", a.shape(), b.shape()).expect("checked in forward");
            let mut ga = need[0].then(|| vec![T::zero(); a.numel()]);
            let mut gb = need[1].then(|| vec![T::zero(); b.numel()]);
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // dA = G·Bᵀ
                    gemm(m, n, k, gi, false, &b.data()[i * k * n..(i + 1) * k * n], true, &mut ga[i * m * k..(i + 1) * m * k], false);
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ·G
                    gemm(k, m, n, &a.data()[i * m * k..(i + 1) * m * k], true, gi, false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
            }
            vec![ga, gb]
        }
        Op::TransposeLastTwo => {
            let s = y.shape();
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            vec![Some(transpose_blocks(g, m, n))]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::ConcatLast => {
            let rows = y.numel() / y.shape().last().unwrap();
            let total = *y.shape().last().unwrap();
            let mut offset = 0;
            x.iter()
                .zip(need)
                .map(|(t, &nd)| {
                    let w = *t.shape().last().unwrap();
                    let r = nd.then(|| {
                        let mut out = Vec::with_capacity(rows * w);
                        for row in 0..rows {
                            out.extend_from_slice(&g[row * total + offset..row * total + offset + w]);
                        }
                        out
                    });
                    offset += w;
                    r
                })
                .collect()
        }
        Op::Slice { axis, start, end } => {
            let s = x[0].shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let dim = s[*axis];
            let w = (end - start) * inner;
            let mut out = vec![T::zero(); x[0].numel()];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
            }
            vec![Some(out)]
        }
        Op::Embedding { ids, .. } => {
            let d = x[0].shape()[1];
            let mut out = vec![T::zero(); x[0].numel()];
            for (k, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    out[id * d + j] = out[id * d + j] + g[k * d + j];
                }
            }
            vec![Some(out)]
        }
        Op::Softmax => {
            let (_, last) = split_last(y.shape());
            let mut out = vec![T::zero(); g.len()];
            for ((yr, gr), o) in y.data().chunks(last).zip(g.chunks(last)).zip(out.chunks_mut(last)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..last {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(out)]
        }
        Op::LogSoftmax => {
            let (_, last) = split_last(y.shape());
            let mut out = vec![T::zero(); g.len()];
            for ((yr, gr), o) in y.data().chunks(last).zip(g.chunks(last)).zip(out.chunks_mut(last)) {
                let gs: T = gr.iter().copied().sum();
                for j in 0..last {
                    o[j] = gr[j] - yr[j].exp() * gs;
                }
            }
            vec![Some(out)]
        }
        Op::Log => {
            let floor = T::cst(LOG_FLOOR);
            vec![Some(
                x[0].data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > floor { gi / v } else { T::zero() })
                    .collect(),
            )]
        }
        Op::Exp => vec![Some(y.data().iter().zip(g).map(|(&v, &gi)| v * gi).collect())],
        Op::Gelu => vec![Some(
            x[0].data().iter().zip(g).map(|(&v, &gi)| gelu_parts(v).1 * gi).collect(),
        )],
        Op::LayerNorm { eps } => {
            let (inp, gain) = (x[0], x[1]);
            let (_, d) = split_last(inp.shape());
            let dn = T::cst(d as f64);
            let mut gx = vec![T::zero(); inp.numel()];
            let mut gg = vec![T::zero(); d];
            let mut gbias = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            let mut gxhat = vec![T::zero(); d];
            for ((row, gr), o) in inp.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let (mu, rstd) = moments(row, *eps);
                for j in 0..d {
                    xhat[j] = (row[j] - mu) * rstd;
                    gxhat[j] = gr[j] * gain.data()[j];
                    gg[j] = gg[j] + gr[j] * xhat[j];
                    gbias[j] = gbias[j] + gr[j];
                }
                let m1 = gxhat.iter().copied().sum::<T>() / dn;
                let m2 = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                for j in 0..d {
                    o[j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
                }
            }
            vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gbias)]
        }
        Op::CausalMask { key_pad } => {
            let s = y.shape();
            let t = s[s.len() - 1];
            let lead = y.numel() / (t * t);
            let mut out = g.to_vec();
            for b in 0..lead {
                for i in 0..t {
                    for j in 0..t {
                        if mask_at(key_pad.as_deref(), b, t, i, j) {
                            out[(b * t + i) * t + j] = T::zero();
                        }
                    }
                }
            }
            vec![Some(out)]
        }
        Op::Sum => vec![Some(vec![g[0]; x[0].numel()])],
        Op::Mean => {
            let n = T::cst(x[0].numel() as f64);
            vec![Some(vec![g[0] / n; x[0].numel()])]
        }
        Op::GatherAt { offsets } => {
            let mut out = vec![T::zero(); x[0].numel()];
            for (&o, &gi) in offsets.iter().zip(g) {
                out[o] = out[o] + gi;
            }
            vec![Some(out)]
        }
        Op::Log1mExp { max } => {
            let max = T::cst(*max);
            vec![Some(
                x[0].data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        if v > max {
                            T::zero()
                        } else {
                            // d/da ln(1 - e^a) = -1 / expm1(-a)
                            -gi / (-v).exp_m1()
                        }
                    })
                    .collect(),
            )]
        }
    }
}
