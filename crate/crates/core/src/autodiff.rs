//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations on [`Var`] handles append nodes to a [`Tape`]. Each node keeps
//! its forward value and a closure mapping the output gradient to gradients
//! of its inputs. [`Tape::backward`] walks the tape in reverse insertion
//! order, which is a valid reverse topological order because a node can
//! only reference nodes that already exist.
//!
//! ```
//! use hsrmamba::autodiff::Tape;
//! use hsrmamba::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum_all().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{ensure, Error, Result};
use crate::tensor::{broadcast_shape, Element, Tensor};

/// Maps the output gradient to one optional gradient per parent. The flags
/// say which parents need a gradient at all.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. One forward/backward pass
/// at a time; independent tapes may live on different threads.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
        }
    }

    /// Debug mode: every recorded op checks its output for NaN/Inf and fails
    /// with [`Error::Numeric`] naming the op.
    pub fn with_finite_check(self, on: bool) -> Self {
        self.check_finite.set(on);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("leaf", value, Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("constant", value, Vec::new(), None, false)
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'_, T>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::Numeric(format!("`{op}` produced a non-finite value")));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(op, value, ids, backward, requires_grad))
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Propagates gradients from a one-element `loss` to every node that
    /// depends on a leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        ensure!(
            root.value.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            root.value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].clone() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op `{}`", node.op);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape from op `{}`",
                    node.op
                );
                accumulate(&mut grads[p], pg);
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// Gradients by node, produced by [`Tape::backward`].
pub struct Grads<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Sigmoid,
    Silu,
    Softplus,
    Relu,
    Abs,
    Scale(f64),
    Offset(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        ensure!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
        Ok(())
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn div(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, BinaryKind::Div)
    }

    /// Elementwise binary op with trailing-dimension broadcasting.
    pub fn binary(self, rhs: Self, kind: BinaryKind) -> Result<Self> {
        self.same_tape(&rhs)?;
        let a = self.value();
        let b = rhs.value();
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::Contract(format!(
                "{kind:?}: shapes {:?} and {:?} do not broadcast",
                a.shape(),
                b.shape()
            ))
        })?;
        if kind == BinaryKind::Div && b.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % na], bd[i % nb]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::from_parts(shape, out);
        let a_shape = a.shape().to_vec();
        let b_shape = b.shape().to_vec();
        self.tape.record("binary", value, &[self, rhs], move |g, needs| {
            let gd = g.data();
            let mut ga = needs[0].then(|| vec![T::zero(); na]);
            let mut gb = needs[1].then(|| vec![T::zero(); nb]);
            let (ad, bd) = (a.data(), b.data());
            for (i, &gi) in gd.iter().enumerate() {
                let (ia, ib) = (i % na, i % nb);
                let (da, db) = match kind {
                    BinaryKind::Add => (gi, gi),
                    BinaryKind::Sub => (gi, -gi),
                    BinaryKind::Mul => (gi * bd[ib], gi * ad[ia]),
                    BinaryKind::Div => {
                        let y = bd[ib];
                        (gi / y, -gi * ad[ia] / (y * y))
                    }
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            }
            vec![
                ga.map(|v| Tensor::from_parts(a_shape.clone(), v)),
                gb.map(|v| Tensor::from_parts(b_shape.clone(), v)),
            ]
        })
    }

    pub fn neg(self) -> Result<Self> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(UnaryKind::Exp)
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn silu(self) -> Result<Self> {
        self.unary(UnaryKind::Silu)
    }

    pub fn softplus(self) -> Result<Self> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(UnaryKind::Relu)
    }

    pub fn abs(self) -> Result<Self> {
        self.unary(UnaryKind::Abs)
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn offset(self, c: f64) -> Result<Self> {
        self.unary(UnaryKind::Offset(c))
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Self> {
        let x = self.value();
        let value = x.map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Silu => v * sigmoid(v),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Scale(c) => v * T::of(c),
            UnaryKind::Offset(c) => v + T::of(c),
        });
        let y = value.clone();
        self.tape.record("unary", value, &[self], move |g, _| {
            let (xd, yd) = (x.data(), y.data());
            let out = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gi)| {
                    let (v, o) = (xd[i], yd[i]);
                    let d = match kind {
                        UnaryKind::Neg => -T::one(),
                        UnaryKind::Exp => o,
                        UnaryKind::Sigmoid => o * (T::one() - o),
                        UnaryKind::Silu => {
                            let s = sigmoid(v);
                            s * (T::one() + v * (T::one() - s))
                        }
                        UnaryKind::Softplus => sigmoid(v),
                        // Subgradient 0 at the kink.
                        UnaryKind::Relu => {
                            if v > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Abs => v.signum() * T::of((v != T::zero()) as u8 as f64),
                        UnaryKind::Scale(c) => T::of(c),
                        UnaryKind::Offset(_) => T::one(),
                    };
                    gi * d
                })
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), out))]
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Self) -> Result<Self> {
        self.same_tape(&rhs)?;
        let a = self.value();
        let b = rhs.value();
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        ensure!(k == k2, "matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]");
        let value = Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n));
        self.tape.record("matmul", value, &[self, rhs], move |g, needs| {
            let gd = g.data();
            // dA = G B^T, dB = A^T G
            let ga = needs[0].then(|| {
                let bt = transpose_raw(b.data(), k, n);
                Tensor::from_parts(vec![m, k], matmul_raw(gd, &bt, m, n, k))
            });
            let gb = needs[1].then(|| {
                let at = transpose_raw(a.data(), m, k);
                Tensor::from_parts(vec![k, n], matmul_raw(&at, gd, k, m, n))
            });
            vec![ga, gb]
        })
    }

    /// Matrix transpose.
    pub fn t(self) -> Result<Self> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let value = Tensor::from_parts(vec![c, r], transpose_raw(x.data(), r, c));
        self.tape.record("transpose", value, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(
                vec![r, c],
                transpose_raw(g.data(), c, r),
            ))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        self.tape.record("reshape", value, &[self], move |g, _| {
            vec![Some(g.reshape(&orig).expect("same element count"))]
        })
    }

    pub fn sum_all(self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes)
    }

    pub fn mean_all(self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes)
    }

    /// Sum or mean over `axes`; reduced axes are dropped from the shape.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            ensure!(
                ax < shape.len(),
                "reduce axis {ax} out of range for shape {shape:?}"
            );
            ensure!(!reduced[ax], "reduce axis {ax} listed twice");
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(d, _)| *d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| **r)
            .map(|(d, _)| *d)
            .product();
        let index = reduce_index(&shape, &reduced);
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_n];
        for (i, &v) in x.data().iter().enumerate() {
            out[index[i]] += v;
        }
        let norm = match kind {
            ReduceKind::Sum => T::one(),
            ReduceKind::Mean => T::one() / T::of(count as f64),
        };
        if kind == ReduceKind::Mean {
            out.iter_mut().for_each(|v| *v *= norm);
        }
        let value = Tensor::from_parts(out_shape, out);
        self.tape.record("reduce", value, &[self], move |g, _| {
            let gd = g.data();
            let data = index.iter().map(|&o| gd[o] * norm).collect();
            vec![Some(Tensor::from_parts(shape.clone(), data))]
        })
    }

    /// Concatenation along axis 0.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0];
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let tail = &values[0].shape()[1..];
        ensure!(!values[0].shape().is_empty(), "concat needs at least one axis");
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            ensure!(
                v.ndim() == values[0].ndim() && &v.shape()[1..] == tail,
                "concat shapes {:?} and {:?} differ past axis 0",
                values[0].shape(),
                v.shape()
            );
        }
        let lead: usize = values.iter().map(|v| v.shape()[0]).sum();
        let mut shape = values[0].shape().to_vec();
        shape[0] = lead;
        let mut data = Vec::with_capacity(shape.iter().product());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let lens: Vec<(Vec<usize>, usize)> = values
            .iter()
            .map(|v| (v.shape().to_vec(), v.numel()))
            .collect();
        first
            .tape
            .record("concat", Tensor::from_parts(shape, data), parts, move |g, needs| {
                let mut off = 0;
                lens.iter()
                    .zip(needs)
                    .map(|((s, n), need)| {
                        let part = need
                            .then(|| Tensor::from_parts(s.clone(), g.data()[off..off + n].to_vec()));
                        off += n;
                        part
                    })
                    .collect()
            })
    }

    /// Slice `[start, start + len)` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        ensure!(
            x.ndim() >= 1 && start + len <= x.shape()[0],
            "narrow [{start}, {}) out of range for shape {:?}",
            start + len,
            x.shape()
        );
        let inner: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let data = x.data()[start * inner..(start + len) * inner].to_vec();
        let full = x.shape().to_vec();
        self.tape
            .record("narrow", Tensor::from_parts(shape, data), &[self], move |g, _| {
                let mut out = vec![T::zero(); full.iter().product()];
                out[start * inner..(start + len) * inner].copy_from_slice(g.data());
                vec![Some(Tensor::from_parts(full.clone(), out))]
            })
    }

    /// Multiplies by `v`, whose shape is a leading prefix of `self`'s shape
    /// (per-channel scaling of a `[C, H, W]` map by a `[C]` vector).
    pub fn mul_leading(self, v: Self) -> Result<Self> {
        self.same_tape(&v)?;
        let x = self.value();
        let s = v.value();
        ensure!(
            x.shape().starts_with(s.shape()),
            "mul_leading: {:?} is not a prefix of {:?}",
            s.shape(),
            x.shape()
        );
        let inner = x.numel() / s.numel().max(1);
        let data: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv * s.data()[i / inner])
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape.record("mul_leading", value, &[self, v], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let d = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * s.data()[i / inner])
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), d)
            });
            let gs = needs[1].then(|| {
                let mut d = vec![T::zero(); s.numel()];
                for (i, (&gi, &xv)) in gd.iter().zip(x.data()).enumerate() {
                    d[i / inner] += gi * xv;
                }
                Tensor::from_parts(s.shape().to_vec(), d)
            });
            vec![gx, gs]
        })
    }

    /// Reorders the last axis: `out[.., j] = x[.., index[j]]`. `index` must
    /// be a permutation of the last axis.
    pub fn permute_last(self, index: &[usize]) -> Result<Self> {
        let x = self.value();
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("permute_last on a scalar".into()))?;
        ensure!(
            index.len() == n,
            "permutation of length {} for last axis of size {n}",
            index.len()
        );
        let mut inverse = vec![usize::MAX; n];
        for (j, &i) in index.iter().enumerate() {
            ensure!(i < n && inverse[i] == usize::MAX, "index is not a permutation");
            inverse[i] = j;
        }
        let value = Tensor::from_parts(x.shape().to_vec(), permute_rows(x.data(), n, index));
        let shape = x.shape().to_vec();
        self.tape.record("permute_last", value, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(
                shape.clone(),
                permute_rows(g.data(), n, &inverse),
            ))]
        })
    }
}

impl<'t, T: Element> Var<'t, T> {
    /// Selects along the last axis: `out[.., j] = x[.., index[j]]`. Indices
    /// may repeat or be skipped; the backward pass accumulates.
    pub fn gather_last(self, index: &[usize]) -> Result<Self> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Contract("gather_last on a scalar".into()))?;
        ensure!(
            index.iter().all(|&i| i < n),
            "gather index out of range for last axis of size {n}"
        );
        let value = permute_rows(x.data(), n, index);
        *shape.last_mut().unwrap() = index.len();
        let index = index.to_vec();
        let in_shape = x.shape().to_vec();
        self.tape.record("gather_last", Tensor::from_parts(shape, value), &[self], move |g, _| {
            let mut out = vec![T::zero(); in_shape.iter().product()];
            let m = index.len();
            for (dst, src) in out.chunks_exact_mut(n).zip(g.data().chunks_exact(m.max(1))) {
                for (&i, &v) in index.iter().zip(src) {
                    dst[i] += v;
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), out))]
        })
    }
}

fn permute_rows<T: Element>(data: &[T], n: usize, index: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(n) {
        out.extend(index.iter().map(|&i| row[i]));
    }
    out
}

/// For each flat input index, the flat output index after dropping the
/// `reduced` axes.
fn reduce_index(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            out_strides[ax] = acc;
            acc *= shape[ax];
        }
    }
    let mut idx = vec![0usize; shape.len()];
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    res
}

pub(crate) fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Element>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences (five-point stencil, step `eps`). Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over elements.
///
/// Points where `f` is not differentiable (relu or abs at exactly 0) are
/// expected to fail; callers keep their inputs away from kinks.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// [`grad_check`] restricted to the flat element indices in `at`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, at: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    ensure!(at.iter().all(|&i| i < x.numel()), "grad check index out of range");
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        f(&tape, v)?.value().item()
    };
    let mut worst = 0.0f64;
    for &i in at {
        let shifted = |offset: f64| -> Result<f64> {
            let mut t = x.clone();
            t.data_mut()[i] += offset;
            eval(t)
        };
        // Fourth-order central stencil.
        let numeric = (shifted(-2.0 * eps)? - 8.0 * shifted(-eps)? + 8.0 * shifted(eps)?
            - shifted(2.0 * eps)?)
            / (12.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn unary_closed_forms() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().unwrap().value().item().unwrap(), 0.5);
        let sp = z.softplus().unwrap().value().item().unwrap();
        assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sp - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn add_matches_hand_arithmetic() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn binary_shape_mismatch_is_contract_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        assert!(matches!(a.add(b), Err(Error::Contract(_))));
    }

    #[test]
    fn division_by_zero_is_numeric_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.div(b), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_hand_cases() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(a).unwrap().value().data(), a.value().data());
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        assert!(matches!(a.matmul(r), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let tape = Tape::new();
        let got = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for p in 0..7 {
                    want += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
                let g = got.data()[i * 3 + j];
                assert!((g - want).abs() <= 1e-6 * want.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(v.sum_all().unwrap().value().item().unwrap(), 6.0);
        let c = tape.constant(Tensor::full(&[2, 3, 4], 1.25));
        assert_eq!(c.mean_all().unwrap().value().item().unwrap(), 1.25);
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(m.reduce(ReduceKind::Sum, &[0]).unwrap().value().data(), &[4.0, 6.0]);
        assert_eq!(m.reduce(ReduceKind::Sum, &[1]).unwrap().value().data(), &[3.0, 7.0]);
        assert!(m.reduce(ReduceKind::Sum, &[2]).is_err());
        assert!(m.reduce(ReduceKind::Sum, &[0, 0]).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.7));
        let g = tape.backward(x.sum_all().unwrap()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let g = tape.backward(x.mul(x).unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_check_mode_catches_overflow() {
        let tape = Tape::<f32>::new().with_finite_check(true);
        let x = tape.constant(Tensor::scalar(1000.0f32));
        assert!(matches!(x.exp(), Err(Error::Numeric(_))));
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(1000.0f32));
        assert!(x.exp().is_ok());
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 4], &mut rng);
        let err = grad_check(|_, v| v.sum_all(), &x, 1e-3).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn grad_check_sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[6], &mut rng);
        let err = grad_check(|_, v| v.sigmoid()?.sum_all(), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn relu_at_kink_is_the_documented_failure() {
        let x = t(&[1], &[0.0]);
        let err = grad_check(|_, v| v.relu()?.sum_all(), &x, 1e-4).unwrap();
        // Analytic subgradient 0 against a numeric slope of 0.5.
        assert!(err > 0.5);
    }

    /// Weighted sum so every output element carries a distinct gradient.
    fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(Tensor::from_fn(&y.shape(), |_| rng.gen_range(-1.0..1.0)));
        y.mul(w)?.sum_all()
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let unary = [
            UnaryKind::Neg,
            UnaryKind::Exp,
            UnaryKind::Sigmoid,
            UnaryKind::Silu,
            UnaryKind::Softplus,
            UnaryKind::Relu,
            UnaryKind::Abs,
            UnaryKind::Scale(-1.5),
            UnaryKind::Offset(0.3),
        ];
        for trial in 0..10u64 {
            // Keep away from the relu/abs kink.
            let x = random(&[2, 3], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let other = random(&[3], &mut rng).map(|v| if v.abs() < 0.2 { 0.5 } else { v });
            for kind in unary {
                let e = grad_check(|tp, v| probe(tp, v.unary(kind)?, trial), &x, 1e-4).unwrap();
                assert!(e <= 1e-3, "{kind:?}: {e}");
            }
            for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div] {
                let o = other.clone();
                let e = grad_check(
                    |tp, v| probe(tp, v.binary(tp.constant(o.clone()), kind)?, trial),
                    &x,
                    1e-4,
                )
                .unwrap();
                assert!(e <= 1e-3, "{kind:?} lhs: {e}");
                let xx = x.clone();
                let e = grad_check(
                    |tp, v| probe(tp, tp.constant(xx.clone()).binary(v, kind)?, trial),
                    &other,
                    1e-4,
                )
                .unwrap();
                assert!(e <= 1e-3, "{kind:?} broadcast rhs: {e}");
            }
            let b = random(&[3, 4], &mut rng);
            let e = grad_check(|tp, v| probe(tp, v.matmul(tp.constant(b.clone()))?, trial), &x, 1e-4)
                .unwrap();
            assert!(e <= 1e-3, "matmul: {e}");
            let e = grad_check(|tp, v| probe(tp, v.t()?, trial), &x, 1e-4).unwrap();
            assert!(e <= 1e-3, "transpose: {e}");
            let e = grad_check(
                |tp, v| probe(tp, v.reduce(ReduceKind::Mean, &[1])?, trial),
                &x,
                1e-4,
            )
            .unwrap();
            assert!(e <= 1e-3, "mean: {e}");
            let e = grad_check(
                |tp, v| probe(tp, Var::concat(&[v, v.narrow(1, 1)?])?, trial),
                &x,
                1e-4,
            )
            .unwrap();
            assert!(e <= 1e-3, "concat/narrow: {e}");
            let s = random(&[2], &mut rng);
            let e = grad_check(
                |tp, v| probe(tp, tp.constant(x.clone()).mul_leading(v)?, trial),
                &s,
                1e-4,
            )
            .unwrap();
            assert!(e <= 1e-3, "mul_leading: {e}");
            let e = grad_check(|tp, v| probe(tp, v.permute_last(&[2, 0, 1])?, trial), &x, 1e-4)
                .unwrap();
            assert!(e <= 1e-3, "permute_last: {e}");
        }
    }

    #[test]
    fn gather_last_accumulates_repeats() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = x.gather_last(&[2, 0, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![2, 4]);
        assert_eq!(y.value().data(), &[3.0, 1.0, 1.0, 2.0, 6.0, 4.0, 4.0, 5.0]);
        let g = tape.backward(y.sum_all().unwrap()).unwrap();
        assert_eq!(g.get_or_zeros(x).data(), &[2.0, 1.0, 1.0, 2.0, 1.0, 1.0]);
        assert!(x.gather_last(&[3]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random(&[2, 5], &mut rng);
        let e = grad_check(
            |tp, v| v.gather_last(&[1, 1, 0, 2, 1])?.mul(tp.constant(w.clone()))?.sum_all(),
            &random(&[2, 3], &mut rng),
            1e-4,
        )
        .unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let tape = Tape::<f64>::new();
            let x = tape.leaf(random(&[4, 4], &mut rng));
            let w = tape.leaf(random(&[4, 4], &mut rng));
            let y = x.matmul(w).unwrap().silu().unwrap().sum_all().unwrap();
            let g = tape.backward(y).unwrap();
            (g.get_or_zeros(x), g.get_or_zeros(w))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }
}
