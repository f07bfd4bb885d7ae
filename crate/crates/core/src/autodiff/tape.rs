use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::scalar::Scalar;

use super::tensor::{matmul_into, split_axis, transpose_into, Tensor};
use super::AutodiffError;

/// Primitive operations the tape can record.
///
/// Broadcasting is limited to `Add`/`Sub` of a tensor whose shape equals the
/// other operand's shape without its leading (batch) dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum Prim<T> {
    /// `(m, k) x (k, n) -> (m, n)`.
    MatMul,
    /// Rank-2 transpose.
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    /// Tensor times a rank-0 node.
    MulScalar,
    /// Multiplication by a constant.
    Scale(T),
    /// Addition of a constant.
    AddConst(T),
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    /// Log-softmax over the last axis.
    LogSoftmax,
    /// Picks one entry per row along the last axis.
    Gather(Rc<[usize]>),
    /// Adjoint of `Gather`: places each value at its index in a new last axis of `classes` entries.
    Scatter { indices: Rc<[usize]>, classes: usize },
    Sum(usize),
    Mean(usize),
    /// Inserts `axis` of length `size`, repeating the values along it.
    Expand { axis: usize, size: usize },
    SumAll,
    /// Broadcasts a one-element tensor to the given shape.
    Fill(Vec<usize>),
    /// Elementwise clamp to `[lo, hi]`; the gradient is zero on and outside the boundary.
    Clamp { lo: T, hi: T },
}

impl<T> Prim<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::MatMul => "matmul",
            Prim::Transpose => "transpose",
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::MulScalar => "mul_scalar",
            Prim::Scale(_) => "scale",
            Prim::AddConst(_) => "add_const",
            Prim::Tanh => "tanh",
            Prim::Relu => "relu",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Sqrt => "sqrt",
            Prim::LogSoftmax => "log_softmax",
            Prim::Gather(_) => "gather",
            Prim::Scatter { .. } => "scatter",
            Prim::Sum(_) => "sum",
            Prim::Mean(_) => "mean",
            Prim::Expand { .. } => "expand",
            Prim::SumAll => "sum_all",
            Prim::Fill(_) => "fill",
            Prim::Clamp { .. } => "clamp",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Prim::MatMul | Prim::Add | Prim::Sub | Prim::Mul | Prim::Div | Prim::MulScalar => 2,
            _ => 1,
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) prim: Option<Prim<T>>,
    inputs: [usize; 2],
    arity: u8,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
}

impl<T> Node<T> {
    pub(crate) fn inputs(&self) -> &[usize] {
        &self.inputs[..self.arity as usize]
    }
}

/// Append-only record of a computation.
///
/// Nodes are stored in creation order, which is a topological order. A
/// backward pass appends its own nodes to the same tape, so gradients can be
/// differentiated again.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.borrow().len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(None, &[], value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(None, &[], value, false)
    }

    pub fn scalar_constant(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub(crate) fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub(crate) fn set_grad_enabled(&self, on: bool) -> bool {
        self.grad_enabled.replace(on)
    }

    fn push(&self, prim: Option<Prim<T>>, inputs: &[usize], value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let mut ids = [0usize; 2];
        ids[..inputs.len()].copy_from_slice(inputs);
        nodes.push(Node { prim, inputs: ids, arity: inputs.len() as u8, value, requires_grad });
        Var { tape: self, id }
    }

    pub(crate) fn check_owned(&self, v: &Var<'_, T>) -> Result<(), AutodiffError> {
        if std::ptr::eq(v.tape, self) && v.id < self.len() {
            Ok(())
        } else {
            Err(AutodiffError::ForeignTape)
        }
    }

    /// Records `prim` applied to `inputs` and returns the output node.
    pub fn record<'t>(&'t self, prim: Prim<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>, AutodiffError> {
        if inputs.len() != prim.arity() {
            return Err(AutodiffError::Arity { op: prim.name(), expected: prim.arity(), got: inputs.len() });
        }
        for v in inputs {
            self.check_owned(v)?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
            let value = forward(&prim, &vals)?;
            (value, ids.iter().any(|&i| nodes[i].requires_grad))
        };
        if requires_grad && self.grad_enabled.get() {
            Ok(self.push(Some(prim), &ids, value, true))
        } else {
            Ok(self.push(None, &[], value, false))
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// A constant copy of this node's value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    fn unary(self, prim: Prim<T>) -> Result<Self, AutodiffError> {
        self.tape.record(prim, &[self])
    }

    fn binary(self, prim: Prim<T>, other: Self) -> Result<Self, AutodiffError> {
        self.tape.record(prim, &[self, other])
    }

    pub fn matmul(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(Prim::MatMul, other)
    }
    pub fn t(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::Transpose)
    }
    pub fn add(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(Prim::Add, other)
    }
    pub fn sub(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(Prim::Sub, other)
    }
    pub fn mul(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(Prim::Mul, other)
    }
    pub fn div(self, other: Self) -> Result<Self, AutodiffError> {
        self.binary(Prim::Div, other)
    }
    /// Multiplies every entry by the rank-0 node `s`.
    pub fn mul_scalar(self, s: Self) -> Result<Self, AutodiffError> {
        self.binary(Prim::MulScalar, s)
    }
    pub fn scale(self, c: T) -> Result<Self, AutodiffError> {
        self.unary(Prim::Scale(c))
    }
    pub fn neg(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::Scale(-T::one()))
    }
    pub fn add_const(self, c: T) -> Result<Self, AutodiffError> {
        self.unary(Prim::AddConst(c))
    }
    pub fn tanh(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::Tanh)
    }
    pub fn relu(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::Relu)
    }
    pub fn exp(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::Exp)
    }
    pub fn ln(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::Log)
    }
    pub fn sqrt(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::Sqrt)
    }
    pub fn square(self) -> Result<Self, AutodiffError> {
        self.mul(self)
    }
    pub fn log_softmax(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::LogSoftmax)
    }
    pub fn gather(self, indices: &[usize]) -> Result<Self, AutodiffError> {
        self.unary(Prim::Gather(indices.into()))
    }
    pub fn sum(self, axis: usize) -> Result<Self, AutodiffError> {
        self.unary(Prim::Sum(axis))
    }
    pub fn mean(self, axis: usize) -> Result<Self, AutodiffError> {
        self.unary(Prim::Mean(axis))
    }
    pub fn expand(self, axis: usize, size: usize) -> Result<Self, AutodiffError> {
        self.unary(Prim::Expand { axis, size })
    }
    pub fn sum_all(self) -> Result<Self, AutodiffError> {
        self.unary(Prim::SumAll)
    }
    pub fn mean_all(self) -> Result<Self, AutodiffError> {
        let n = self.with_value(|t| t.len());
        self.sum_all()?.scale(T::one() / T::lit(n as f64))
    }
    pub fn clamp(self, lo: T, hi: T) -> Result<Self, AutodiffError> {
        self.unary(Prim::Clamp { lo, hi })
    }
}

fn mismatch<T>(prim: &Prim<T>, shapes: &[&[usize]], why: &str) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: prim.name(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: why.to_string(),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// `a (op) b` where `b` is either the same shape or `a` without its leading dimension.
fn broadcast_binary<T: Scalar>(
    prim: &Prim<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, AutodiffError> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    if a.rank() >= 1 && &a.shape()[1..] == b.shape() {
        let width = b.len();
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(width) {
            data.extend(row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    Err(mismatch(prim, &[a.shape(), b.shape()], "operands must match or broadcast over the leading dimension"))
}

fn same_shape<T: Scalar>(prim: &Prim<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), AutodiffError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(prim, &[a.shape(), b.shape()], "operands must have identical shapes"))
    }
}

fn check_axis<T>(prim: &Prim<T>, t_shape: &[usize], axis: usize) -> Result<(), AutodiffError> {
    if axis < t_shape.len() {
        Ok(())
    } else {
        Err(mismatch(prim, &[t_shape], &format!("axis {axis} out of range")))
    }
}

fn last_axis_rows<T>(prim: &Prim<T>, shape: &[usize]) -> Result<(usize, usize), AutodiffError> {
    match shape.last() {
        Some(&c) => Ok((shape.iter().product::<usize>() / c, c)),
        None => Err(mismatch(prim, &[shape], "needs rank >= 1")),
    }
}

pub(crate) fn forward<T: Scalar>(prim: &Prim<T>, ins: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
    let a = ins[0];
    let out = match prim {
        Prim::MatMul => {
            let b = ins[1];
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(prim, &[a.shape(), b.shape()], "expected (m,k) x (k,n)"));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], matmul_into(a.data(), b.data(), m, k, n))
        }
        Prim::Transpose => {
            if a.rank() != 2 {
                return Err(mismatch(prim, &[a.shape()], "expected a matrix"));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::from_parts(vec![c, r], transpose_into(a.data(), r, c))
        }
        Prim::Add => broadcast_binary(prim, a, ins[1], |x, y| x + y)?,
        Prim::Sub => broadcast_binary(prim, a, ins[1], |x, y| x - y)?,
        Prim::Mul => {
            same_shape(prim, a, ins[1])?;
            zip_map(a, ins[1], |x, y| x * y)
        }
        Prim::Div => {
            same_shape(prim, a, ins[1])?;
            zip_map(a, ins[1], |x, y| x / y)
        }
        Prim::MulScalar => {
            let s = ins[1];
            if s.rank() != 0 {
                return Err(mismatch(prim, &[a.shape(), s.shape()], "second operand must be rank 0"));
            }
            let s = s.item();
            a.map(|x| x * s)
        }
        Prim::Scale(c) => a.map(|x| x * *c),
        Prim::AddConst(c) => a.map(|x| x + *c),
        Prim::Tanh => a.map(|x| x.tanh()),
        Prim::Relu => a.map(|x| if x > T::zero() { x } else { T::zero() }),
        Prim::Exp => a.map(|x| x.exp()),
        Prim::Log => a.map(|x| x.ln()),
        Prim::Sqrt => a.map(|x| x.sqrt()),
        Prim::LogSoftmax => {
            let (_, c) = last_axis_rows(prim, a.shape())?;
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks(c) {
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                data.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Prim::Gather(idx) => {
            let (rows, c) = last_axis_rows(prim, a.shape())?;
            if idx.len() != rows {
                return Err(mismatch(prim, &[a.shape(), &[idx.len()]], "one index per row required"));
            }
            let mut data = Vec::with_capacity(rows);
            for (r, &j) in idx.iter().enumerate() {
                if j >= c {
                    return Err(AutodiffError::IndexOutOfRange { op: prim.name(), index: j, bound: c });
                }
                data.push(a.data()[r * c + j]);
            }
            Tensor::from_parts(a.shape()[..a.rank() - 1].to_vec(), data)
        }
        Prim::Scatter { indices, classes } => {
            let rows = a.len();
            if indices.len() != rows || *classes == 0 {
                return Err(mismatch(prim, &[a.shape(), &[indices.len()]], "one index per entry required"));
            }
            let mut data = vec![T::zero(); rows * classes];
            for (r, &j) in indices.iter().enumerate() {
                if j >= *classes {
                    return Err(AutodiffError::IndexOutOfRange { op: prim.name(), index: j, bound: *classes });
                }
                data[r * classes + j] = a.data()[r];
            }
            let mut shape = a.shape().to_vec();
            shape.push(*classes);
            Tensor::from_parts(shape, data)
        }
        Prim::Sum(axis) | Prim::Mean(axis) => {
            check_axis(prim, a.shape(), *axis)?;
            let (outer, n, inner) = split_axis(a.shape(), *axis);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &a.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
            if matches!(prim, Prim::Mean(_)) {
                let inv = T::one() / T::lit(n as f64);
                data.iter_mut().for_each(|v| *v = *v * inv);
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            Tensor::from_parts(shape, data)
        }
        Prim::Expand { axis, size } => {
            if *axis > a.rank() || *size == 0 {
                return Err(mismatch(prim, &[a.shape()], &format!("cannot insert axis {axis} of size {size}")));
            }
            let mut shape = a.shape().to_vec();
            shape.insert(*axis, *size);
            let (outer, n, inner) = split_axis(&shape, *axis);
            let mut data = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let src = &a.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    data.extend_from_slice(src);
                }
            }
            Tensor::from_parts(shape, data)
        }
        Prim::SumAll => Tensor::scalar(a.data().iter().copied().sum()),
        Prim::Fill(shape) => {
            if a.len() != 1 || shape.iter().any(|&d| d == 0) {
                return Err(mismatch(prim, &[a.shape(), shape], "fill needs a one-element input"));
            }
            Tensor::full(shape, a.data()[0])
        }
        Prim::Clamp { lo, hi } => {
            if lo > hi {
                return Err(mismatch(prim, &[a.shape()], "clamp bounds out of order"));
            }
            a.map(|x| x.max(*lo).min(*hi))
        }
    };
    Ok(out)
}
