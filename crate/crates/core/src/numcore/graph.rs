//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose inputs are strictly earlier nodes, so the
//! tape order is a topological order and backward is a single reverse sweep.

use std::cell::Cell;
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{kernels, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and for the sign-flip fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRow,
    MatMul,
    MatMulNt,
    Transpose,
    Gelu,
    Abs,
    Square,
    Exp,
    Log,
    Sum,
    Mean,
    MeanRows,
    Softmax,
    LogSoftmax,
    LayerNorm,
    L2Normalize,
    GatherRows,
    ConcatRows,
    SliceCols,
    ConcatCols,
    RepeatRows,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddRow,
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Transpose,
        OpKind::Gelu,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::L2Normalize,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::RepeatRows,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddRow => "add_row",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Transpose => "transpose",
            OpKind::Gelu => "gelu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::RepeatRows => "repeat_rows",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == s)
    }
}

thread_local! {
    static SIGN_FLIP: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Test fixture: negates the backward rule of one op kind on this thread.
#[doc(hidden)]
pub fn inject_sign_flip(kind: Option<OpKind>) {
    SIGN_FLIP.with(|c| c.set(kind));
}

fn sign_flip_active(kind: OpKind) -> bool {
    SIGN_FLIP.with(|c| c.get() == Some(kind))
}

#[derive(Debug)]
enum Op<T: Float> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRow(usize, usize),
    MatMul(usize, usize, [usize; 3]),
    MatMulNt(usize, usize, [usize; 3]),
    Transpose(usize, [usize; 2]),
    Gelu(usize),
    Abs(usize),
    Square(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Softmax(usize, [usize; 3]),
    LogSoftmax(usize, [usize; 3]),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
        clamped: Vec<bool>,
    },
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    RepeatRows(usize, usize),
    Reshape(usize),
}

impl<T: Float> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Abs(..) => OpKind::Abs,
            Op::Square(..) => OpKind::Square,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::RepeatRows(..) => OpKind::RepeatRows,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::MatMul(a, b, _) | Op::MatMulNt(a, b, _) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Transpose(x, _)
            | Op::Gelu(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::GatherRows(x, _)
            | Op::RepeatRows(x, _)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::L2Normalize { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A recorded computation. Build it with the op methods, then call [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), Var>,
    backward_done: bool,
    first_non_finite: Option<(usize, OpKind)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    let k0 = T::from_f64(GELU_K0);
    let k1 = T::from_f64(GELU_K1);
    let half = T::from_f64(0.5);
    let u = k0 * (x + k1 * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * k0 * (T::one() + T::from_f64(3.0) * k1 * x * x);
    (y, dy)
}

fn axis_split(shape: &[usize], axis: usize) -> [usize; 3] {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    [outer, len, inner]
}

fn accumulate<T: Float>(slot: &mut Option<Vec<T>>, contrib: &[T]) {
    match slot {
        Some(g) => {
            for (a, &b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

fn accumulate_with<T: Float>(slot: &mut Option<Vec<T>>, n: usize, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| vec![T::zero(); n]);
    f(g);
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last backward pass with respect to `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let rg = inputs.iter().any(|&i| self.nodes[i].value.requires_grad());
        value.set_requires_grad(rg);
        if self.first_non_finite.is_none()
            && !value.all_finite()
            && inputs.iter().all(|&i| self.nodes[i].value.all_finite())
        {
            self.first_non_finite = Some((self.nodes.len(), op.kind()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(true);
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a stored parameter once per graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id).clone();
        let v = if store.is_frozen() {
            self.constant(t)
        } else {
            self.leaf(t)
        };
        self.params.insert(key, v);
        v
    }

    /// Gradient a stored parameter received, or `None` if it took no part in the loss.
    pub fn param_grad(&self, store: &ParamStore<T>, id: ParamId) -> Option<&[T]> {
        self.params
            .get(&(store.uid(), id.index()))
            .and_then(|&v| self.grad(v))
    }

    /// Gradients for every parameter of `store`, zero-filled where unused.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        store
            .ids()
            .map(|id| match self.param_grad(store, id) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); store.get(id).numel()],
            })
            .collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((i, k)) => Err(Error::NonFinite(format!("{} (node {i})", k.name()))),
            None => Ok(()),
        }
    }

    // ---------------------------------------------------------------- ops

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sa.shape().is_empty() || sb.shape().is_empty() {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", sa.shape(), sb.shape())))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data).unwrap()
        } else if tb.shape().is_empty() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else {
            let x = ta.item();
            tb.map(|y| f(x, y))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x.0))
    }

    /// `x[n×d] + b[d]` with `b` repeated over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, d) = tx.rows_cols();
        if tb.numel() != d || tx.ndim() < 1 {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, Op::AddRow(x.0, b.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::mm(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a.0, b.0, [m, k, n])))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMulNt(a.0, b.0, [m, k, n])))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.transpose()?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        Ok(self.push(out, Op::Transpose(x.0, [r, c])))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x.0))
    }

    /// Mean over rows: `[n×d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::shape("mean_rows", format!("{:?}", t.shape())));
        }
        let (n, d) = t.rows_cols();
        let mut acc = vec![T::zero(); d];
        for r in 0..n {
            for (a, &v) in acc.iter_mut().zip(t.row(r)) {
                *a = *a + v;
            }
        }
        let inv = T::one() / T::from_f64(n as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let out = Tensor::new(&[d], acc)?;
        Ok(self.push(out, Op::MeanRows(x.0)))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<[usize; 3]> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {shape:?}")));
        }
        Ok(axis_split(shape, axis))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.check_axis("softmax", x, axis)?;
        let [outer, len, inner] = split;
        let t = self.value(x);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::Softmax(x.0, split)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.check_axis("log_softmax", x, axis)?;
        let [outer, len, inner] = split;
        let t = self.value(x);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let z = (0..len).map(|j| (src[at(j)] - mx).exp()).sum::<T>();
                let lse = mx + z.ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax(x.0, split)))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.rows_cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "width {d} vs gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
        ))
    }

    /// Divides each row (last axis) by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (n, d) = t.rows_cols();
        let eps = T::from_f64(eps);
        let mut norms = vec![T::zero(); n];
        let mut clamped = vec![false; n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = t.row(r);
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let (den, cl) = if nrm > eps { (nrm, false) } else { (eps, true) };
            norms[r] = den;
            clamped[r] = cl;
            for c in 0..d {
                out[r * d + c] = row[c] / den;
            }
        }
        let out = Tensor::new(t.shape(), out).unwrap();
        self.push(
            out,
            Op::L2Normalize {
                x: x.0,
                norms,
                clamped,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let out = self.value(x).gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(x.0, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let d = self.value(parts[0]).rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.rows_cols();
            if c != d || t.ndim() != 2 {
                return Err(Error::shape(
                    "concat_rows",
                    format!("expected [_, {d}], got {:?}", t.shape()),
                ));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|v| v.0).collect())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.rows_cols();
        if t.ndim() != 2 || len == 0 || start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[n, len], data)?;
        Ok(self.push(out, Op::SliceCols { x: x.0, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let n = self.value(parts[0]).rows_cols().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).rows_cols().1).collect();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.rows_cols().0 != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("expected {n} rows, got {:?}", t.shape()),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[n, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    /// Repeats a vector `[d]` (or `[1×d]`) into `[n×d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows_cols().0 != 1 || n == 0 {
            return Err(Error::shape("repeat_rows", format!("{:?} x{n}", t.shape())));
        }
        let d = t.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[n, d], data)?;
        Ok(self.push(out, Op::RepeatRows(x.0, n)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0)))
    }

    // ----------------------------------------------------------- backward

    /// Clears all gradients so that [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        self.backward_done = false;
    }

    /// Fills the gradient slot of every node that depends on a leaf with `d loss / d node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.ensure_finite()?;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            let inputs = node.op.inputs();
            if inputs.iter().any(|&j| j >= i) {
                return Err(Error::Cycle(i));
            }
            if sign_flip_active(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.value.requires_grad(), g) {
                node.value.set_grad(g)?;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].value.requires_grad();
        let val = |j: usize| nodes[j].value.data();
        let numel = |j: usize| nodes[j].value.numel();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                for (j, s) in [(*a, T::one()), (*b, sign)] {
                    if !needs(j) {
                        continue;
                    }
                    if numel(j) == g.len() {
                        let c: Vec<T> = g.iter().map(|&v| v * s).collect();
                        accumulate(&mut grads[j], &c);
                    } else {
                        let total = g.iter().copied().sum::<T>() * s;
                        accumulate(&mut grads[j], &[total]);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (j, k) in [(*a, *b), (*b, *a)] {
                    if !needs(j) {
                        continue;
                    }
                    let other = val(k);
                    if numel(j) == g.len() {
                        let c: Vec<T> = if other.len() == g.len() {
                            g.iter().zip(other).map(|(&u, &v)| u * v).collect()
                        } else {
                            g.iter().map(|&u| u * other[0]).collect()
                        };
                        accumulate(&mut grads[j], &c);
                    } else {
                        let total = g.iter().zip(other).map(|(&u, &v)| u * v).sum::<T>();
                        accumulate(&mut grads[j], &[total]);
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate_with(&mut grads[*x], g.len(), |d| {
                    for (a, &u) in d.iter_mut().zip(g) {
                        *a = *a + u * c;
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads[*x], g),
            Op::AddRow(x, b) => {
                if needs(*x) {
                    accumulate(&mut grads[*x], g);
                }
                if needs(*b) {
                    let d = numel(*b);
                    accumulate_with(&mut grads[*b], d, |db| {
                        for (k, &u) in g.iter().enumerate() {
                            db[k % d] = db[k % d] + u;
                        }
                    });
                }
            }
            Op::MatMul(a, b, [m, k, n]) => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let bv = val(*b);
                    accumulate_with(&mut grads[*a], m * k, |da| {
                        kernels::mm_nt(g, bv, da, m, n, k)
                    });
                }
                if needs(*b) {
                    let av = val(*a);
                    accumulate_with(&mut grads[*b], k * n, |db| {
                        kernels::mm_tn(av, g, db, m, k, n)
                    });
                }
            }
            Op::MatMulNt(a, b, [m, k, n]) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let bv = val(*b);
                    accumulate_with(&mut grads[*a], m * k, |da| kernels::mm(g, bv, da, m, n, k));
                }
                if needs(*b) {
                    let av = val(*a);
                    accumulate_with(&mut grads[*b], n * k, |db| {
                        kernels::mm_tn(g, av, db, m, n, k)
                    });
                }
            }
            Op::Transpose(x, [r, c]) => {
                // output is [c×r]
                let mut t = vec![T::zero(); r * c];
                kernels::transpose(g, &mut t, *c, *r);
                accumulate(&mut grads[*x], &t);
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let c: Vec<T> = g.iter().zip(xv).map(|(&u, &v)| u * gelu_parts(v).1).collect();
                accumulate(&mut grads[*x], &c);
            }
            Op::Abs(x) => {
                let xv = val(*x);
                let c: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&u, &v)| {
                        if v > T::zero() {
                            u
                        } else if v < T::zero() {
                            -u
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(&mut grads[*x], &c);
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = T::from_f64(2.0);
                let c: Vec<T> = g.iter().zip(xv).map(|(&u, &v)| u * two * v).collect();
                accumulate(&mut grads[*x], &c);
            }
            Op::Exp(x) => {
                let c: Vec<T> = g.iter().zip(out).map(|(&u, &y)| u * y).collect();
                accumulate(&mut grads[*x], &c);
            }
            Op::Log(x) => {
                let xv = val(*x);
                let c: Vec<T> = g.iter().zip(xv).map(|(&u, &v)| u / v).collect();
                accumulate(&mut grads[*x], &c);
            }
            Op::Sum(x) => {
                let n = numel(*x);
                let u = g[0];
                accumulate_with(&mut grads[*x], n, |d| d.iter_mut().for_each(|a| *a = *a + u));
            }
            Op::Mean(x) => {
                let n = numel(*x);
                let u = g[0] / T::from_f64(n as f64);
                accumulate_with(&mut grads[*x], n, |d| d.iter_mut().for_each(|a| *a = *a + u));
            }
            Op::MeanRows(x) => {
                let (n, d) = nodes[*x].value.rows_cols();
                let inv = T::one() / T::from_f64(n as f64);
                accumulate_with(&mut grads[*x], n * d, |dx| {
                    for (k, a) in dx.iter_mut().enumerate() {
                        *a = *a + g[k % d] * inv;
                    }
                });
            }
            Op::Softmax(x, [outer, len, inner]) => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let mut c = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i2;
                        let dot = (0..len).map(|j| g[at(j)] * out[at(j)]).sum::<T>();
                        for j in 0..len {
                            c[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[*x], &c);
            }
            Op::LogSoftmax(x, [outer, len, inner]) => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let mut c = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i2;
                        let gs = (0..len).map(|j| g[at(j)]).sum::<T>();
                        for j in 0..len {
                            c[at(j)] = g[at(j)] - out[at(j)].exp() * gs;
                        }
                    }
                }
                accumulate(&mut grads[*x], &c);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = numel(*gamma);
                let n = rstd.len();
                let gv = val(*gamma);
                if needs(*gamma) {
                    accumulate_with(&mut grads[*gamma], d, |dg| {
                        for (k, &u) in g.iter().enumerate() {
                            dg[k % d] = dg[k % d] + u * xhat[k];
                        }
                    });
                }
                if needs(*beta) {
                    accumulate_with(&mut grads[*beta], d, |db| {
                        for (k, &u) in g.iter().enumerate() {
                            db[k % d] = db[k % d] + u;
                        }
                    });
                }
                if needs(*x) {
                    let dn = T::from_f64(d as f64);
                    accumulate_with(&mut grads[*x], n * d, |dx| {
                        for r in 0..n {
                            let row = r * d..(r + 1) * d;
                            let gh: Vec<T> =
                                row.clone().map(|k| g[k] * gv[k - r * d]).collect();
                            let mean_gh = gh.iter().copied().sum::<T>() / dn;
                            let mean_ghx = gh
                                .iter()
                                .zip(&xhat[row.clone()])
                                .map(|(&a, &b)| a * b)
                                .sum::<T>()
                                / dn;
                            for (c, k) in row.enumerate() {
                                dx[k] = dx[k] + rstd[r] * (gh[c] - mean_gh - xhat[k] * mean_ghx);
                            }
                        }
                    });
                }
            }
            Op::L2Normalize { x, norms, clamped } => {
                let n = norms.len();
                let d = g.len() / n;
                let mut c = vec![T::zero(); g.len()];
                for r in 0..n {
                    let row = r * d..(r + 1) * d;
                    if clamped[r] {
                        for k in row {
                            c[k] = g[k] / norms[r];
                        }
                    } else {
                        let dot = row.clone().map(|k| g[k] * out[k]).sum::<T>();
                        for k in row {
                            c[k] = (g[k] - out[k] * dot) / norms[r];
                        }
                    }
                }
                accumulate(&mut grads[*x], &c);
            }
            Op::GatherRows(x, idx) => {
                let (r, d) = nodes[*x].value.rows_cols();
                accumulate_with(&mut grads[*x], r * d, |dx| {
                    for (k, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            dx[src * d + c] = dx[src * d + c] + g[k * d + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel(p);
                    if needs(p) {
                        accumulate(&mut grads[p], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (n, d) = nodes[*x].value.rows_cols();
                accumulate_with(&mut grads[*x], n * d, |dx| {
                    for r in 0..n {
                        for c in 0..*len {
                            dx[r * d + start + c] = dx[r * d + start + c] + g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.rows_cols().1;
                let n = g.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.rows_cols().1;
                    if needs(p) {
                        accumulate_with(&mut grads[p], n * w, |dp| {
                            for r in 0..n {
                                for c in 0..w {
                                    dp[r * w + c] = dp[r * w + c] + g[r * total + off + c];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::RepeatRows(x, n) => {
                let d = numel(*x);
                accumulate_with(&mut grads[*x], d, |dx| {
                    for r in 0..*n {
                        for c in 0..d {
                            dx[c] = dx[c] + g[r * d + c];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = g.constant(t64(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let z = g.matmul(p, q).unwrap();
        assert_eq!(g.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_rejects_bad_inner_extent() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = g.constant(t64(&[2], &[1000.0, 0.0]));
        let s = g.softmax(y, 0).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 && d[1] >= 0.0);
        assert!(g.ensure_finite().is_ok());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t64(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6);

        let gamma3 = g.constant(Tensor::ones(&[3]));
        let beta3 = g.constant(Tensor::zeros(&[3]));
        let c = g.constant(t64(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(c, gamma3, beta3, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_and_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x, 1e-12);
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        let z = g.constant(Tensor::zeros(&[5]));
        let m = g.mean(z);
        assert_eq!(g.scalar_value(m), 0.0);
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[0.0, 1.0]));
        let l = g.log(x);
        let s = g.sum(l);
        assert!(matches!(g.backward(s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[1.0, 2.0]));
        let c = g.constant(t64(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn scalar_broadcast_in_binary_ops() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[3], &[1.0, 2.0, 3.0]));
        let k = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, k).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(k).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_param_is_registered_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t64(&[2], &[1.0, 1.0]), true);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.param_grad(&store, id).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_store_is_constant() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t64(&[2], &[1.0, 1.0]), true);
        store.freeze();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let x = g.leaf(t64(&[2], &[2.0, 3.0]));
        let y = g.mul(w, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.param_grad(&store, id).is_none());
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::parse(k.name()), Some(k));
        }
    }
}
