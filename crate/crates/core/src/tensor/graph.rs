use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, split_axis};
use super::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Primitive applied at one entry of the computation record. Inputs are node
/// ids; values needed by the reverse rule are read back from the record.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    L1Norm(usize),
    L2Norm(usize),
    SqDist(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    GatherRows { table: usize, indices: Vec<usize> },
    Gather { input: usize, indices: Vec<usize> },
    AddRow(usize, usize),
    LerpRows { s: usize, v: usize, alpha: usize },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::SqDist(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Sqrt(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::L1Norm(a)
            | Op::L2Norm(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } | Op::Gather { input, .. } => vec![*input],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { table, .. } => vec![*table],
            Op::LerpRows { s, v, alpha } => vec![*s, *v, *alpha],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::L1Norm(..) => "l1_norm",
            Op::L2Norm(..) => "l2_norm",
            Op::SqDist(..) => "sq_dist",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::Gather { .. } => "gather",
            Op::AddRow(..) => "add_row",
            Op::LerpRows { .. } => "lerp_rows",
        }
    }
}

/// Names of every differentiable primitive a [`Var`] exposes.
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "scale",
        "shift",
        "matmul",
        "bmm",
        "transpose",
        "permute",
        "reshape",
        "concat",
        "slice",
        "exp",
        "log",
        "relu",
        "sigmoid",
        "tanh",
        "sqrt",
        "clamp_min",
        "softmax",
        "log_softmax",
        "sum_axis",
        "mean_axis",
        "sum",
        "mean",
        "l1_norm",
        "l2_norm",
        "sq_dist",
        "layer_norm",
        "gather_rows",
        "gather",
        "add_row",
        "lerp_rows",
    ]
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// One entry of the computation record as seen from outside the graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub id: usize,
    pub primitive: &'static str,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
}

/// The computation record. Entries are appended in evaluation order, so every
/// input of an entry precedes it.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.nodes.borrow().len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// The recorded primitive applications in evaluation order.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(id, n)| RecordEntry {
                id,
                primitive: n.op.name(),
                inputs: n.op.inputs(),
                requires_grad: n.requires_grad,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Entries that cannot reach a trainable leaf are recorded as constants
        // so the reverse pass never visits them.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'g> {
        let rg = {
            let nodes = self.graph.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.graph.push(value, op, rg)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.value().map(f);
        self.emit(out, op, &[self.id])
    }

    fn binary_same_shape(
        &self,
        other: &Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(other);
        let out = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.emit(out, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    /// Adds a constant to every element.
    pub fn shift(&self, c: f64) -> Var<'g> {
        self.unary(Op::Shift(self.id), |x| x + c)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// Multiplies by a scalar (one-element) variable.
    pub fn mul_scalar(&self, s: &Var<'g>) -> Result<Var<'g>> {
        let n = self.value().numel();
        if s.value().numel() != 1 {
            return Err(Error::shape("mul_scalar", &self.shape(), &s.shape()));
        }
        let shape = self.shape();
        let expanded = s.reshape(&[1, 1])?.gather_rows(&vec![0; n])?.reshape(&shape)?;
        self.mul(&expanded)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (m, k, k2, n) = match (a.shape(), b.shape()) {
                ([m, k], [k2, n]) => (*m, *k, *k2, *n),
                _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
            };
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            kernels::mm_nn(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new(&[m, n], out)?
        };
        Ok(self.emit(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Batched matrix product `[b,m,k]·[b,k,n]`, or `[b,m,k]·[b,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&self, other: &Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        self.same_graph(other);
        let out = {
            let a = self.value();
            let b = other.value();
            let err = || Error::shape("bmm", a.shape(), b.shape());
            let (bs, m, k, bs2, r, c) = match (a.shape(), b.shape()) {
                ([bs, m, k], [bs2, r, c]) => (*bs, *m, *k, *bs2, *r, *c),
                _ => return Err(err()),
            };
            let (kb, n) = if trans_b { (c, r) } else { (r, c) };
            if bs != bs2 || k != kb {
                return Err(err());
            }
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                let ad = &a.data()[i * m * k..(i + 1) * m * k];
                let bd = &b.data()[i * k * n..(i + 1) * k * n];
                let od = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    kernels::mm_nt(ad, bd, m, k, n, od);
                } else {
                    kernels::mm_nn(ad, bd, m, k, n, od);
                }
            }
            Tensor::new(&[bs, m, n], out)?
        };
        Ok(self.emit(
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        ))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        if self.value().ndim() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("needs a 2-D tensor, got {:?}", self.shape()),
            ));
        }
        self.permute(&[1, 0])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let rank = x.ndim();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::invalid(
                    "permute",
                    format!("{perm:?} is not a permutation of the axes of {:?}", x.shape()),
                ));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            let mut out = vec![0.0; x.numel()];
            kernels::permute(x.data(), x.shape(), perm, &mut out);
            Tensor::new(&shape, out)?
        };
        Ok(self.emit(out, Op::Permute(self.id, perm.to_vec()), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.emit(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let out = {
            let vals: Vec<Ref<Tensor>> = parts.iter().map(|p| p.value()).collect();
            let s0 = vals[0].shape().to_vec();
            if axis >= s0.len() {
                return Err(Error::invalid(
                    "concat",
                    format!("axis {axis} out of range for {s0:?}"),
                ));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let compatible = s.len() == s0.len()
                    && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &s0, s));
                }
                total += s[axis];
            }
            let mut shape = s0.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel_of(&shape));
            for o in 0..outer {
                for v in &vals {
                    let n = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
                }
            }
            Tensor::new(&shape, out)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(out, Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if axis >= x.ndim() || start + len > x.shape()[axis] {
                return Err(Error::invalid(
                    "slice",
                    format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
                ));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, out)?
        };
        Ok(self.emit(
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn clamp_min(&self, lo: f64) -> Var<'g> {
        self.unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    fn rowwise(&self, name: &'static str, op: Op, f: fn(&[f64], usize, &mut [f64])) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let cols = x.cols();
            if x.ndim() == 0 || cols == 0 {
                return Err(Error::invalid(name, format!("empty last axis in {:?}", x.shape())));
            }
            let mut out = vec![0.0; x.numel()];
            f(x.data(), cols, &mut out);
            Tensor::new(x.shape(), out)?
        };
        Ok(self.emit(out, op, &[self.id]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        self.rowwise("softmax", Op::Softmax(self.id), kernels::softmax_rows)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'g>> {
        self.rowwise("log_softmax", Op::LogSoftmax(self.id), kernels::log_softmax_rows)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'g>> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let out = {
            let x = self.value();
            if axis >= x.ndim() {
                return Err(Error::invalid(name, format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            if mean && n == 0 {
                return Err(Error::invalid(name, "mean over an empty axis"));
            }
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &x.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if mean {
                let inv = 1.0 / n as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::new(&shape, out)?
        };
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        Ok(self.emit(out, op, &[self.id]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum(&self) -> Var<'g> {
        let s: f64 = self.value().data().iter().sum();
        self.emit(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if x.numel() == 0 {
                return Err(Error::invalid("mean", "empty tensor"));
            }
            x.data().iter().sum::<f64>() / x.numel() as f64
        };
        Ok(self.emit(Tensor::scalar(out), Op::MeanAll(self.id), &[self.id]))
    }

    pub fn l1_norm(&self) -> Var<'g> {
        let s: f64 = self.value().data().iter().map(|v| v.abs()).sum();
        self.emit(Tensor::scalar(s), Op::L1Norm(self.id), &[self.id])
    }

    pub fn l2_norm(&self) -> Var<'g> {
        let s: f64 = self.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.emit(Tensor::scalar(s), Op::L2Norm(self.id), &[self.id])
    }

    /// Pairwise squared Euclidean distances between the rows of `[n,c]` and
    /// `[m,c]`, giving `[n,m]`.
    pub fn sq_dist(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (n, c, m, c2) = match (a.shape(), b.shape()) {
                ([n, c], [m, c2]) => (*n, *c, *m, *c2),
                _ => return Err(Error::shape("sq_dist", a.shape(), b.shape())),
            };
            if c != c2 {
                return Err(Error::shape("sq_dist", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let ar = &a.data()[i * c..(i + 1) * c];
                for j in 0..m {
                    let br = &b.data()[j * c..(j + 1) * c];
                    out[i * m + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
            Tensor::new(&[n, m], out)?
        };
        Ok(self.emit(out, Op::SqDist(self.id, other.id), &[self.id, other.id]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(gamma);
        self.same_graph(beta);
        let out = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let c = x.cols();
            if g.shape() != [c] || b.shape() != [c] || x.ndim() == 0 {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let mut out = vec![0.0; x.numel()];
            for (xr, or) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                let (mu, inv) = row_moments(xr, eps);
                for k in 0..c {
                    or[k] = (xr[k] - mu) * inv * g.data()[k] + b.data()[k];
                }
            }
            Tensor::new(x.shape(), out)?
        };
        Ok(self.emit(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Embedding lookup: rows of a `[v,c]` table, giving `[indices.len(), c]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'g>> {
        let out = {
            let t = self.value();
            let (v, c) = match t.shape() {
                [v, c] => (*v, *c),
                s => return Err(Error::invalid("gather_rows", format!("table must be 2-D, got {s:?}"))),
            };
            if let Some(bad) = indices.iter().find(|&&i| i >= v) {
                return Err(Error::invalid("gather_rows", format!("index {bad} out of range for {v} rows")));
            }
            let mut out = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(&[indices.len(), c], out)?
        };
        Ok(self.emit(
            out,
            Op::GatherRows {
                table: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Selects elements by flat row-major index, giving a 1-D tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if let Some(bad) = indices.iter().find(|&&i| i >= x.numel()) {
                return Err(Error::invalid("gather", format!("index {bad} out of range for {} elements", x.numel())));
            }
            Tensor::new(&[indices.len()], indices.iter().map(|&i| x.data()[i]).collect())?
        };
        Ok(self.emit(
            out,
            Op::Gather {
                input: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Adds a `[n]` vector to every length-`n` row along the last axis.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(row);
        let out = {
            let x = self.value();
            let r = row.value();
            let c = x.cols();
            if x.ndim() == 0 || r.shape() != [c] {
                return Err(Error::shape("add_row", x.shape(), r.shape()));
            }
            let mut out = x.data().to_vec();
            for or in out.chunks_exact_mut(c) {
                for (o, b) in or.iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            Tensor::new(x.shape(), out)?
        };
        Ok(self.emit(out, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// Per-row convex combination `alpha_r · s_r + (1 − alpha_r) · v_r` of two
    /// `[r,c]` matrices with weights `alpha` of shape `[r,1]`.
    ///
    /// The result is clamped to the closed interval spanned by `s` and `v` so
    /// that rounding never leaves it.
    pub fn lerp_rows(s: &Var<'g>, v: &Var<'g>, alpha: &Var<'g>) -> Result<Var<'g>> {
        s.same_graph(v);
        s.same_graph(alpha);
        let out = {
            let sv = s.value();
            let vv = v.value();
            let av = alpha.value();
            if sv.shape() != vv.shape() || sv.ndim() != 2 {
                return Err(Error::shape("lerp_rows", sv.shape(), vv.shape()));
            }
            let (r, c) = (sv.shape()[0], sv.shape()[1]);
            if av.shape() != [r, 1] {
                return Err(Error::shape("lerp_rows", sv.shape(), av.shape()));
            }
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let a = av.data()[i];
                for k in 0..c {
                    let (x, y) = (sv.data()[i * c + k], vv.data()[i * c + k]);
                    let val = a * x + (1.0 - a) * y;
                    out[i * c + k] = val.clamp(x.min(y), x.max(y));
                }
            }
            Tensor::new(&[r, c], out)?
        };
        Ok(s.emit(
            out,
            Op::LerpRows {
                s: s.id,
                v: v.id,
                alpha: alpha.id,
            },
            &[s.id, v.id, alpha.id],
        ))
    }
}

/// Mean and inverse standard deviation of one row.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mu = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c;
    (mu, 1.0 / (var + eps).sqrt())
}
