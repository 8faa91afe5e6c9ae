//! Dense `f64` tensors and a tape-style reverse-mode autodiff graph.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node that
//! stores its output value and parent handles; [`Graph::backward`] walks the
//! tape once in reverse append order and accumulates gradients additively.

use crate::error::{Error, Result};

/// Dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len());
    index
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {shape:?}");
            acc * d + i
        })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Population variance (divide by n).
    Var,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Unary(UnaryOp, Var),
    SoftmaxLast(Var),
    Reduce(Reduction, Var, usize),
    SumAll(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    NormalizeLast(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only autodiff tape. Parents of node `k` always have index `< k`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not require grad
    /// or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Like [`get`](Self::get) but unreachable leaves yield zeros.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.is_finite() || !self.parents(&op).iter().all(|p| self.value(*p).is_finite()),
            "non-finite output from {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Binary(_, a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Unary(_, a)
            | Op::SoftmaxLast(a)
            | Op::Reduce(_, a, _)
            | Op::SumAll(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::NormalizeLast(a, _) => vec![*a],
            Op::ConcatLast(vs) => vs.clone(),
        }
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Batch dims must be equal, or one side's batch must have a single element.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geo = MatmulGeometry::new(&sa, &sb)?;
        let out = {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            let mut out = vec![0.0; geo.batch * geo.m * geo.n];
            for i in 0..geo.batch {
                let (ai, bi) = geo.operand_batches(i);
                matmul_into(
                    &av[ai * geo.m * geo.k..(ai + 1) * geo.m * geo.k],
                    &bv[bi * geo.k * geo.n..(bi + 1) * geo.k * geo.n],
                    &mut out[i * geo.m * geo.n..(i + 1) * geo.m * geo.n],
                    geo.m,
                    geo.k,
                    geo.n,
                );
            }
            out
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: geo.out_shape,
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("elementwise", self.shape(a), self.shape(b)));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    fn row_op(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let n = *sx.last().unwrap();
        if sr.len() != 1 || sr[0] != n {
            return Err(Error::shape(
                if mul { "mul_row" } else { "add_row" },
                sx,
                sr,
            ));
        }
        let r = &self.value(row).data;
        let data = self
            .value(x)
            .data
            .chunks(n)
            .flat_map(|c| {
                c.iter()
                    .zip(r)
                    .map(move |(&a, &b)| if mul { a * b } else { a + b })
            })
            .collect();
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, row]);
        let op = if mul {
            Op::MulRow(x, row)
        } else {
            Op::AddRow(x, row)
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// `x[.., n] + row[n]`, broadcast over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, false)
    }

    /// `x[.., n] * row[n]`, broadcast over all leading axes.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, true)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v * c).collect();
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, c), rg)
    }

    pub fn unary(&mut self, kind: UnaryOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Relu => |v| v.max(0.0),
            UnaryOp::Gelu => gelu,
        };
        let t = self.value(x);
        let data = t.data.iter().map(|&v| f(v)).collect();
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Unary(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Gelu, x)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape.last().unwrap();
        let mut data = t.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::SoftmaxLast(x), rg)
    }

    /// Mean or population variance along `axis`; the axis is removed
    /// (a rank-1 input yields shape `[1]`).
    pub fn reduce(&mut self, kind: Reduction, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = &self.value(x).data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| src[(o * len + j) * inner + i];
                let mean = (0..len).map(at).sum::<f64>() / len as f64;
                out[o * inner + i] = match kind {
                    Reduction::Mean => mean,
                    Reduction::Var => {
                        (0..len).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / len as f64
                    }
                };
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Reduce(kind, x, axis),
            rg,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Mean, x, axis)
    }

    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Var, x, axis)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Axis permutation; `axes[i]` names the input axis placed at output axis `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let value = permute_tensor(self.value(x), axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::AxisOutOfRange { axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenate along the last axis; leading axes must match.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast(xs.to_vec()), rg))
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis, population variance.
    pub fn normalize_last(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = *t.shape.last().unwrap();
        let mut data = t.data.clone();
        for row in data.chunks_mut(n) {
            let (mean, inv) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::NormalizeLast(x, eps), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        // only requires_grad nodes carry gradients
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let geo =
                    MatmulGeometry::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let (m, k, n) = (geo.m, geo.k, geo.n);
                acc(*a, &mut |ga| {
                    for i in 0..geo.batch {
                        let (ai, bi) = geo.operand_batches(i);
                        let gyb = &gy[i * m * n..(i + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let gab = &mut ga[ai * m * k..(ai + 1) * m * k];
                        // dA = dC . B^T
                        for r in 0..m {
                            for c in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gyb[r * n + j] * bb[c * n + j];
                                }
                                gab[r * k + c] += s;
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..geo.batch {
                        let (ai, bi) = geo.operand_batches(i);
                        let gyb = &gy[i * m * n..(i + 1) * m * n];
                        let ab = &av[ai * m * k..(ai + 1) * m * k];
                        let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                        // dB = A^T . dC
                        for r in 0..m {
                            for c in 0..k {
                                let a_rc = ab[r * k + c];
                                if a_rc == 0.0 {
                                    continue;
                                }
                                let row = &gyb[r * n..(r + 1) * n];
                                for (g, &d) in gbb[c * n..(c + 1) * n].iter_mut().zip(row) {
                                    *g += a_rc * d;
                                }
                            }
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                match kind {
                    BinaryOp::Add => {
                        acc(*a, &mut |g| add_into(g, gy));
                        acc(*b, &mut |g| add_into(g, gy));
                    }
                    BinaryOp::Sub => {
                        acc(*a, &mut |g| add_into(g, gy));
                        acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
                    }
                    BinaryOp::Mul => {
                        acc(*a, &mut |g| {
                            for ((g, d), y) in g.iter_mut().zip(gy).zip(bv) {
                                *g += d * y;
                            }
                        });
                        acc(*b, &mut |g| {
                            for ((g, d), x) in g.iter_mut().zip(gy).zip(av) {
                                *g += d * x;
                            }
                        });
                    }
                }
            }
            Op::AddRow(x, row) | Op::MulRow(x, row) => {
                let mul = matches!(node.op, Op::MulRow(..));
                let n = self.value(*row).len();
                let (xv, rv) = (&self.value(*x).data, &self.value(*row).data);
                acc(*x, &mut |g| {
                    if mul {
                        for (i, (g, d)) in g.iter_mut().zip(gy).enumerate() {
                            *g += d * rv[i % n];
                        }
                    } else {
                        add_into(g, gy);
                    }
                });
                acc(*row, &mut |g| {
                    for (i, d) in gy.iter().enumerate() {
                        g[i % n] += if mul { d * xv[i] } else { *d };
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d)
            }),
            Op::Unary(kind, x) => {
                let (xv, yv) = (&self.value(*x).data, &node.value.data);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        let local = match kind {
                            UnaryOp::Sigmoid => yv[i] * (1.0 - yv[i]),
                            UnaryOp::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Gelu => gelu_grad(xv[i]),
                        };
                        g[i] += gy[i] * local;
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let yv = &node.value.data;
                let n = *node.value.shape.last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(yv.chunks(n)).zip(gy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Reduce(kind, x, axis) => {
                let t = self.value(*x);
                let (outer, len, inner) = split_axis(&t.shape, *axis);
                let xv = &t.data;
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = gy[o * inner + i];
                            let idx = |j: usize| (o * len + j) * inner + i;
                            match kind {
                                Reduction::Mean => {
                                    for j in 0..len {
                                        g[idx(j)] += d / len as f64;
                                    }
                                }
                                Reduction::Var => {
                                    let mean =
                                        (0..len).map(|j| xv[idx(j)]).sum::<f64>() / len as f64;
                                    for j in 0..len {
                                        g[idx(j)] += d * 2.0 * (xv[idx(j)] - mean) / len as f64;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = permute_tensor(
                    &Tensor {
                        shape: node.value.shape.clone(),
                        data: gy.to_vec(),
                    },
                    &inverse,
                );
                acc(*x, &mut |g| add_into(g, &gt.data));
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::ConcatLast(xs) => {
                let total = *node.value.shape.last().unwrap();
                let mut offset = 0;
                for &v in xs {
                    let w = *self.shape(v).last().unwrap();
                    acc(v, &mut |g| {
                        for (r, gr) in g.chunks_mut(w).enumerate() {
                            add_into(gr, &gy[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::NormalizeLast(x, eps) => {
                let xt = self.value(*x);
                let n = *xt.shape.last().unwrap();
                let yv = &node.value.data;
                acc(*x, &mut |g| {
                    for (((gr, xr), yr), dr) in g
                        .chunks_mut(n)
                        .zip(xt.data.chunks(n))
                        .zip(yv.chunks(n))
                        .zip(gy.chunks(n))
                    {
                        let (_, inv) = row_stats(xr, *eps);
                        let mean_d = dr.iter().sum::<f64>() / n as f64;
                        let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gr[j] += inv * (dr[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_strides = strides(&t.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.data.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        data.push(t.data[src]);
        // odometer increment over the output index
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

struct MatmulGeometry {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_batch: usize,
    b_batch: usize,
    out_shape: Vec<usize>,
}

impl MatmulGeometry {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (na, nb): (usize, usize) = (ba.iter().product(), bb.iter().product());
        let batch_shape = if ba == bb || nb == 1 && ba.len() >= bb.len() {
            ba.to_vec()
        } else if na == 1 && bb.len() >= ba.len() {
            bb.to_vec()
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch: batch_shape.iter().product(),
            a_batch: na,
            b_batch: nb,
            out_shape,
        })
    }

    fn operand_batches(&self, i: usize) -> (usize, usize) {
        (
            if self.a_batch == 1 { 0 } else { i },
            if self.b_batch == 1 { 0 } else { i },
        )
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let a_rc = a[r * k + c];
            if a_rc == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += a_rc * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_batch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::eye(2));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 2]);
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1., 2.]));
        let y = g.constant(t(&[2], &[3., 4.]));
        let s = g.add(x, y).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let z = g.sub(x, x).unwrap();
        assert_eq!(g.value(z).data(), &[0., 0.]);
        let zero = g.constant(Tensor::scalar(0.0));
        let h = g.sigmoid(zero);
        assert_eq!(g.value(h).item(), 0.5);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.mul(x, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0., 0.]));
        let b = g.constant(t(&[2], &[1000., 1000.]));
        let c = g.constant(t(&[2], &[0., 3f64.ln()]));
        for (v, want) in [(a, [0.5, 0.5]), (b, [0.5, 0.5]), (c, [0.25, 0.75])] {
            let s = g.softmax_last(v);
            for (x, w) in g.value(s).data().iter().zip(want) {
                assert!((x - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1., 3.]));
        let m = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let v = g.var_axis(x, 0).unwrap();
        assert_eq!(g.value(v).item(), 1.0);
        let c = g.constant(t(&[3], &[2.5, 2.5, 2.5]));
        let vc = g.var_axis(c, 0).unwrap();
        assert_eq!(g.value(vc).item(), 0.0);
        assert!(matches!(
            g.mean_axis(x, 1),
            Err(Error::AxisOutOfRange { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn reduce_middle_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let m = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.shape(m), &[2, 2]);
        assert_eq!(g.value(m).data(), &[2., 3., 8., 9.]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 5.]));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn concat_last_interleaves_rows() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1., 2.]));
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
    }
}
