//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation performed through a [`Var`] is appended to its [`Tape`].
//! Because nodes can only reference nodes created before them, the tape is
//! always in topological order, and [`Tape::backward`] walks it once from the
//! loss towards the leaves.
//!
//! ```
//! use spe_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
//! let y = x.square().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Tapes are rebuilt for each training step; they are cheap to create and are
//! single-threaded (`!Sync`).

use std::cell::{Cell, RefCell};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires strictly positive input, found {value}")]
    NonPositive { op: &'static str, value: f64 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("axis {axis} out of range for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor. A shape of `[]` denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AutodiffError::InvalidTensor(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Reciprocal(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    Matmul(usize, usize),
    Sum {
        input: usize,
        axis: Option<usize>,
    },
    Broadcast(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    LogSumExp(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(Op::Leaf, value, true, "leaf")
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(Op::Leaf, value, false, "constant")
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Propagates d(loss)/d(node) back to every node of the tape.
    ///
    /// A tape can be differentiated once; a second call fails with
    /// [`AutodiffError::TapeConsumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(AutodiffError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape.clone();
        if nodes[loss.id].value.len() != 1 || loss_shape.len() > 1 {
            return Err(AutodiffError::NotScalar(loss_shape));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value.data;
    let wants = |id: usize| nodes[id].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (id, sign) in [(*a, 1.0), (*b, 1.0)] {
                if wants(id) {
                    accumulate(grads, id, g.len(), |s| {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g)
                    });
                }
            }
        }
        Op::Sub(a, b) => {
            for (id, sign) in [(*a, 1.0), (*b, -1.0)] {
                if wants(id) {
                    accumulate(grads, id, g.len(), |s| {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g)
                    });
                }
            }
        }
        Op::Hadamard(a, b) => {
            let (av, bv) = (&nodes[*a].value.data, &nodes[*b].value.data);
            if wants(*a) {
                accumulate(grads, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
            }
            if wants(*b) {
                accumulate(grads, *b, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                accumulate(grads, *a, g.len(), |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
                });
            }
        }
        Op::Offset(a) => {
            if wants(*a) {
                accumulate(grads, *a, g.len(), |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
            }
        }
        Op::Reciprocal(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Softplus(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Relu(a) => {
            if !wants(*a) {
                return;
            }
            let x = &nodes[*a].value.data;
            let local: fn(f64, f64) -> f64 = match node.op {
                Op::Reciprocal(_) => |_, y| -y * y,
                Op::Exp(_) => |_, y| y,
                Op::Log(_) => |x, _| 1.0 / x,
                Op::Softplus(_) => |x, _| sigmoid(x),
                Op::Square(_) => |x, _| 2.0 * x,
                Op::Sqrt(_) => |_, y| 0.5 / y,
                Op::Relu(_) => |x, _| if x > 0.0 { 1.0 } else { 0.0 },
                _ => unreachable!(),
            };
            accumulate(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * local(x[i], out[i]);
                }
            });
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            if wants(*a) {
                // dA = G · Bᵀ
                accumulate(grads, *a, m * k, |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data[p * n..(p + 1) * n];
                            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            s[i * k + p] += dot;
                        }
                    }
                });
            }
            if wants(*b) {
                // dB = Aᵀ · G
                accumulate(grads, *b, k * n, |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let srow = &mut s[p * n..(p + 1) * n];
                            srow.iter_mut().zip(grow).for_each(|(s, g)| *s += a_ip * g);
                        }
                    }
                });
            }
        }
        Op::Sum { input, axis } => {
            if !wants(*input) {
                return;
            }
            let shape = &nodes[*input].value.shape;
            let len = nodes[*input].value.len();
            match axis {
                None => accumulate(grads, *input, len, |s| {
                    s.iter_mut().for_each(|s| *s += g[0])
                }),
                Some(axis) => {
                    let (outer, n, inner) = split_axis(shape, *axis);
                    accumulate(grads, *input, len, |s| {
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    s[(o * n + j) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
        }
        Op::Broadcast(a) => {
            if !wants(*a) {
                return;
            }
            let src = &nodes[*a].value;
            let map = broadcast_index_map(&src.shape, &node.value.shape);
            accumulate(grads, *a, src.len(), |s| {
                for (o, &i) in map.iter().enumerate() {
                    s[i] += g[o];
                }
            });
        }
        Op::Reshape(a) => {
            if wants(*a) {
                accumulate(grads, *a, g.len(), |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(&node.value.shape, *axis);
            let total = node.value.shape[*axis];
            let mut offset = 0;
            for &id in inputs {
                let n = nodes[id].value.shape[*axis];
                if wants(id) {
                    accumulate(grads, id, outer * n * inner, |s| {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut s[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                }
                offset += n;
            }
        }
        Op::Slice { input, axis, start } => {
            if !wants(*input) {
                return;
            }
            let src = &nodes[*input].value;
            let (outer, total, inner) = split_axis(&src.shape, *axis);
            let n = node.value.shape[*axis];
            accumulate(grads, *input, src.len(), |s| {
                for o in 0..outer {
                    let dst = &mut s[(o * total + start) * inner..(o * total + start + n) * inner];
                    let src = &g[o * n * inner..(o + 1) * n * inner];
                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::LogSumExp(a) => {
            if !wants(*a) {
                return;
            }
            let x = &nodes[*a].value;
            let n = *x.shape.last().expect("rank checked in forward");
            accumulate(grads, *a, x.len(), |s| {
                for (r, (&go, &lse)) in g.iter().zip(out.iter()).enumerate() {
                    for j in 0..n {
                        let idx = r * n + j;
                        s[idx] += go * (x.data[idx] - lse).exp();
                    }
                }
            });
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// contribute to the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros_like_shape(shape),
        }
    }
}

impl Tensor {
    fn zeros_like_shape(shape: Vec<usize>) -> Self {
        let n = shape.iter().product::<usize>().max(1);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `ln Σ exp(xᵢ)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcastable(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let pad = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &s)| s == dst[pad + i] || s == 1)
}

/// For every flat output index, the flat source index it reads from.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let pad = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        strides[pad + i] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; dst.len()];
    for _ in 0..total {
        map.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..dst.len()).rev() {
            index[ax] += 1;
            if index[ax] < dst[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    map
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    fn unary(
        self,
        name: &'static str,
        make: fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| f(v)).collect(),
            }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(make(self.id), value, needs, name)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.shape != b.shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(make(self.id, other.id), value, needs, name)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn hadamard(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "hadamard", Op::Hadamard, |a, b| a * b)
    }

    /// Multiplication by a constant.
    pub fn mul(self, factor: f64) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|v| v * factor).collect(),
            }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape
            .push(Op::Scale(self.id, factor), value, needs, "mul")
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul(-1.0)
    }

    /// Addition of a constant.
    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|v| v + c).collect(),
            }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(Op::Offset(self.id), value, needs, "offset")
    }

    fn require_positive(self, name: &'static str) -> Result<()> {
        let x = self.tape.value_of(self.id);
        match x.data.iter().find(|&&v| v <= 0.0) {
            Some(&value) => Err(AutodiffError::NonPositive { op: name, value }),
            None => Ok(()),
        }
    }

    pub fn reciprocal(self) -> Result<Var<'t>> {
        self.require_positive("reciprocal")?;
        self.unary("reciprocal", Op::Reciprocal, |x| 1.0 / x)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp, f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.require_positive("log")?;
        self.unary("log", Op::Log, f64::ln)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", Op::Softplus, softplus)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", Op::Square, |x| x * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.require_positive("sqrt")?;
        self.unary("sqrt", Op::Sqrt, f64::sqrt)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu, |x| x.max(0.0))
    }

    /// Matrix product of `[m, k]` and `[k, n]` tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = a.data[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    let brow = &b.data[p * n..(p + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, b)| *o += a_ip * b);
                }
            }
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape
            .push(Op::Matmul(self.id, other.id), value, needs, "matmul")
    }

    /// Sum of all elements (`axis = None`, giving a scalar) or along one axis,
    /// which is removed from the shape.
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            match axis {
                None => Tensor::scalar(x.data.iter().sum()),
                Some(axis) => {
                    if axis >= x.rank() {
                        return Err(AutodiffError::InvalidAxis {
                            axis,
                            rank: x.rank(),
                        });
                    }
                    let (outer, n, inner) = split_axis(&x.shape, axis);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                out[o * inner + i] += x.data[(o * n + j) * inner + i];
                            }
                        }
                    }
                    let mut shape = x.shape.clone();
                    shape.remove(axis);
                    Tensor { shape, data: out }
                }
            }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(
            Op::Sum {
                input: self.id,
                axis,
            },
            value,
            needs,
            "sum",
        )
    }

    /// Expands to `shape` following right-aligned broadcasting rules: missing
    /// leading axes and axes of length 1 are repeated.
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            if !broadcastable(&x.shape, shape) || shape.contains(&0) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast",
                    lhs: x.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            let map = broadcast_index_map(&x.shape, shape);
            Tensor {
                shape: shape.to_vec(),
                data: map.iter().map(|&i| x.data[i]).collect(),
            }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape
            .push(Op::Broadcast(self.id), value, needs, "broadcast")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let n: usize = shape.iter().product();
            if n != x.len() || shape.contains(&0) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "reshape",
                    lhs: x.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor {
                shape: shape.to_vec(),
                data: x.data.clone(),
            }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape
            .push(Op::Reshape(self.id), value, needs, "reshape")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            if axis >= x.rank() {
                return Err(AutodiffError::InvalidAxis {
                    axis,
                    rank: x.rank(),
                });
            }
            if start >= end || end > x.shape[axis] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "slice",
                    lhs: x.shape.clone(),
                    rhs: vec![start, end],
                });
            }
            let (outer, total, inner) = split_axis(&x.shape, axis);
            let n = end - start;
            let mut data = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                data.extend_from_slice(
                    &x.data[(o * total + start) * inner..(o * total + end) * inner],
                );
            }
            let mut shape = x.shape.clone();
            shape[axis] = n;
            Tensor { shape, data }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            value,
            needs,
            "slice",
        )
    }

    /// `ln Σ exp` over the last axis, which is removed from the shape.
    pub fn log_sum_exp(self) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let Some(&n) = x.shape.last() else {
                return Err(AutodiffError::InvalidAxis { axis: 0, rank: 0 });
            };
            let data = x.data.chunks(n).map(log_sum_exp).collect();
            Tensor {
                shape: x.shape[..x.rank() - 1].to_vec(),
                data,
            }
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape
            .push(Op::LogSumExp(self.id), value, needs, "log_sum_exp")
    }
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| AutodiffError::InvalidTensor("concat needs at least one input".into()))?;
    let tape = first.tape;
    let value = {
        let values: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
        let base = &values[0].shape;
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in &values {
            let compatible = v.rank() == base.len()
                && v.shape
                    .iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: v.shape.clone(),
                });
            }
            total += v.shape[axis];
        }
        let (outer, _, inner) = split_axis(base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape[axis];
                data.extend_from_slice(&v.data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Tensor { shape, data }
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    tape.push(Op::Concat { inputs: ids, axis }, value, needs, "concat")
}
