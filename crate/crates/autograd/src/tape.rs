use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{check_shape, numel, split_axis};
use crate::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Unary(usize, Unary),
    Gelu {
        a: usize,
        tanh: Vec<T>,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    ReduceMax {
        a: usize,
        argmax: Vec<usize>,
    },
    SumAll(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Gather {
        a: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    RowNorm(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    /// Node ids produced by `detach`, in call order.
    detached: Vec<usize>,
    /// Values substituted for upcoming `detach` results, with the next position.
    replay: Option<(Vec<Tensor<T>>, usize)>,
}

/// Append-only record of tensor operations.
///
/// Nodes are appended in execution order, so iterating them backwards is a
/// valid reverse topological order.
pub struct Tape<T: Real> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::new(&self.shapes[v.id], g.to_vec()).expect("gradient shape"))
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Vec<T>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
                detached: Vec::new(),
                replay: None,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears every recorded node. Requires exclusive access, so no [`Var`] can outlive it.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.consumed = false;
        inner.detached.clear();
        inner.replay = None;
    }

    /// Values returned by every [`Var::detach`] so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor<T>> {
        let inner = self.inner.borrow();
        inner
            .detached
            .iter()
            .map(|&id| (*inner.nodes[id].value).clone())
            .collect()
    }

    /// Makes the next [`Var::detach`] calls return `values` (in order) instead
    /// of their argument while shapes agree. This holds stop-gradients fixed at
    /// another evaluation point, as finite-difference checks require.
    pub fn replay_detached(&self, values: Vec<Tensor<T>>) {
        self.inner.borrow_mut().replay = Some((values, 0));
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a gradient-tracked leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn tracks(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let rg = self.tracks(parents);
        self.push(value, op, rg)
    }

    /// Reverse pass from a scalar output.
    ///
    /// A tape can be differentiated once; a second call without [`Tape::reset`]
    /// is an error rather than a silent accumulation.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let out_shape = inner.nodes[output.id].value.shape().to_vec();
        if numel(&out_shape) != 1 {
            return Err(TensorError::NonScalarBackward(out_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[output.id].requires_grad {
            grads[output.id] = Some(vec![T::one()]);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(nodes, id, &node.op, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only nodes that require gradients keep them.
        for (g, node) in grads.iter_mut().zip(nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

/// Adds `g` (shaped like the larger operand) into a possibly suffix-broadcast operand.
/// Adds `sign * g` into a same-sized gradient, moving instead of zero-filling
/// when the slot is still empty.
fn acc_full<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, g: &[T], sign: T) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(d) => {
            for (dv, gv) in d.iter_mut().zip(g) {
                *dv += sign * *gv;
            }
        }
        slot @ None => {
            *slot = Some(if sign == T::one() {
                g.to_vec()
            } else {
                g.iter().map(|v| sign * *v).collect()
            })
        }
    }
}

fn acc_broadcast<T: Real>(dst: &mut [T], g: &[T], sign: T) {
    if dst.is_empty() {
        return;
    }
    for chunk in g.chunks(dst.len()) {
        for (d, gv) in dst.iter_mut().zip(chunk) {
            *d += sign * *gv;
        }
    }
}

/// `dst += g * other` where `dst` and `other` tile `g` cyclically.
fn acc_product<T: Real>(dst: &mut [T], g: &[T], other: &[T]) {
    let (nd, no) = (dst.len(), other.len());
    let m = nd.min(no);
    if m == 0 {
        return;
    }
    for (k, gc) in g.chunks(m).enumerate() {
        let off = k * m;
        let dd = &mut dst[off % nd..off % nd + m];
        let oc = &other[off % no..off % no + m];
        for ((d, gv), ov) in dd.iter_mut().zip(gc).zip(oc) {
            *d += *gv * *ov;
        }
    }
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    op: &Op<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let av = val(a).data();
            let bv = val(b).data();
            acc(grads, nodes, a, |da| {
                for bi in 0..batch {
                    let boff = if shared_rhs { 0 } else { bi * k * n };
                    // dA = dC * B^T
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g[bi * m * n..].as_ptr(),
                            n as isize,
                            1,
                            bv[boff..].as_ptr(),
                            1,
                            n as isize,
                            T::one(),
                            da[bi * m * k..].as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
            });
            acc(grads, nodes, b, |db| {
                if shared_rhs {
                    let rows = batch * m;
                    unsafe {
                        T::gemm(
                            k,
                            rows,
                            n,
                            T::one(),
                            av.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            T::one(),
                            db.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                } else {
                    for bi in 0..batch {
                        // dB = A^T * dC
                        unsafe {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                av[bi * m * k..].as_ptr(),
                                1,
                                k as isize,
                                g[bi * m * n..].as_ptr(),
                                n as isize,
                                1,
                                T::one(),
                                db[bi * k * n..].as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            });
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            for (p, s) in [(a, T::one()), (b, sign)] {
                if val(p).len() == g.len() {
                    acc_full(grads, nodes, p, g, s);
                } else {
                    acc(grads, nodes, p, |d| acc_broadcast(d, g, s));
                }
            }
        }
        &Op::Mul(a, b) => {
            let av = val(a).data();
            let bv = val(b).data();
            acc(grads, nodes, a, |d| acc_product(d, g, bv));
            acc(grads, nodes, b, |d| acc_product(d, g, av));
        }
        &Op::Scale(a, s) => acc_full(grads, nodes, a, g, s),
        &Op::Offset(a) | &Op::Reshape(a) => acc_full(grads, nodes, a, g, T::one()),
        Op::Gelu { a, tanh } => {
            let x = val(*a).data();
            acc(grads, nodes, *a, |d| {
                for ((dv, gv), (xv, t)) in d.iter_mut().zip(g).zip(x.iter().zip(tanh)) {
                    *dv += *gv * gelu_grad(*xv, *t);
                }
            });
        }
        &Op::Unary(a, kind) => {
            let x = val(a).data();
            let y = nodes[id].value.data();
            acc(grads, nodes, a, |d| {
                let it = d.iter_mut().zip(g).zip(x.iter().zip(y));
                match kind {
                    Unary::Relu => it.for_each(|((d, g), (x, _))| {
                        if *x > T::zero() {
                            *d += *g
                        }
                    }),
                    Unary::Tanh => it.for_each(|((d, g), (_, y))| *d += *g * (T::one() - *y * *y)),
                    Unary::Sigmoid => {
                        it.for_each(|((d, g), (_, y))| *d += *g * *y * (T::one() - *y))
                    }
                    Unary::Gelu => it.for_each(|((d, g), (x, _))| {
                        let t = gelu_tanh(*x);
                        *d += *g * gelu_grad(*x, t)
                    }),
                }
            });
        }
        &Op::Softmax { a, axis } => {
            let y = &nodes[id].value;
            let (outer, len, inner) = split_axis(y.shape(), axis);
            let yv = y.data();
            acc(grads, nodes, a, |d| {
                if inner == 1 {
                    let w = len.max(1);
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(yv.chunks(w)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (a, b)| s + *a * *b);
                        for ((dv, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += *y * (*gv - dot);
                        }
                    }
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            dot += g[p] * yv[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] += yv[p] * (g[p] - dot);
                        }
                    }
                }
            });
        }
        Op::ReduceMax { a, argmax } => acc(grads, nodes, *a, |d| {
            for (gv, &src) in g.iter().zip(argmax) {
                d[src] += *gv;
            }
        }),
        &Op::SumAll(a) => acc(grads, nodes, a, |d| {
            for dv in d.iter_mut() {
                *dv += g[0];
            }
        }),
        &Op::SumAxis { a, axis } => {
            let (outer, len, inner) = split_axis(val(a).shape(), axis);
            acc(grads, nodes, a, |d| {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = nodes[id].value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                acc(grads, nodes, p, |d| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for (dv, gv) in d[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *dv += *gv;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Gather { a, axis, indices } => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let q = indices.len();
            acc(grads, nodes, *a, |d| {
                for o in 0..outer {
                    for (j, &ix) in indices.iter().enumerate() {
                        let src = (o * q + j) * inner;
                        let dst = (o * len + ix) * inner;
                        for t in 0..inner {
                            d[dst + t] += g[src + t];
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma).data();
            let c = gv.len();
            let rows = xhat.len() / c;
            let cn = T::from_usize(c).unwrap();
            acc(grads, nodes, *x, |d| {
                let mut dxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let row = r * c..(r + 1) * c;
                    let xh = &xhat[row.clone()];
                    let gr = &g[row.clone()];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        dxhat[j] = gr[j] * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xh[j];
                    }
                    let scale = rstd[r] / cn;
                    for j in 0..c {
                        d[r * c + j] += scale * (cn * dxhat[j] - s1 - xh[j] * s2);
                    }
                }
            });
            acc(grads, nodes, *gamma, |d| {
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ((dv, gv), xh) in d.iter_mut().zip(gr).zip(xr) {
                        *dv += *gv * *xh;
                    }
                }
            });
            acc(grads, nodes, *beta, |d| acc_broadcast(d, g, T::one()));
        }
        Op::Permute { a, perm } => {
            let in_shape = val(*a).shape();
            let inv = invert(perm);
            // Gradient of a permutation is the inverse permutation of the output gradient.
            let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
            let back = permute_data(g, &out_shape, &inv);
            acc_full(grads, nodes, *a, &back, T::one());
        }
        &Op::RowNorm(a) => {
            let x = val(a);
            let w = *x.shape().last().unwrap();
            let y = nodes[id].value.data();
            let xv = x.data();
            acc(grads, nodes, a, |d| {
                for (r, (&yr, &gr)) in y.iter().zip(g).enumerate() {
                    if yr > T::zero() {
                        for j in 0..w {
                            d[r * w + j] += gr * xv[r * w + j] / yr;
                        }
                    }
                }
            });
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    (c * (x + a * x * x * x)).tanh()
}

/// GELU derivative given `t = gelu_tanh(x)`.
fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Broadcast rule: equal shapes, or the shorter shape is a suffix of the longer one.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub(crate) fn node_id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// Copy of this value with no gradient connection.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value();
        let replayed = {
            let mut inner = self.tape.inner.borrow_mut();
            match &mut inner.replay {
                Some((values, next)) if *next < values.len() => {
                    *next += 1;
                    let r = &values[*next - 1];
                    (r.shape() == v.shape()).then(|| r.clone())
                }
                _ => None,
            }
        };
        let out = self
            .tape
            .push(replayed.unwrap_or_else(|| (*v).clone()), Op::Leaf, false);
        self.tape.inner.borrow_mut().detached.push(out.id);
        out
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading batch axes must agree, or `rhs` may be rank 2 and shared by every batch.
    pub fn matmul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if !shared_rhs && batch_a != batch_b {
            return Err(mismatch());
        }
        let batch = numel(batch_a);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (a.data(), b.data());
        if shared_rhs {
            unsafe {
                T::gemm(
                    batch * m,
                    k,
                    n,
                    T::one(),
                    av.as_ptr(),
                    k as isize,
                    1,
                    bv.as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        } else {
            for bi in 0..batch {
                unsafe {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        av[bi * m * k..].as_ptr(),
                        k as isize,
                        1,
                        bv[bi * k * n..].as_ptr(),
                        n as isize,
                        1,
                        T::zero(),
                        out[bi * m * n..].as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.tape.record(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[self.id, rhs.id],
        ))
    }

    fn binary(
        &self,
        rhs: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize, usize)> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let shape = broadcast_shape(op, a.shape(), b.shape())?;
        let (av, bv) = (a.data(), b.data());
        let n = numel(&shape);
        let m = av.len().min(bv.len());
        let mut data = Vec::with_capacity(n);
        if m > 0 {
            for k in 0..n / m {
                let off = k * m;
                let ac = &av[off % av.len()..][..m];
                let bc = &bv[off % bv.len()..][..m];
                data.extend(ac.iter().zip(bc).map(|(&x, &y)| f(x, y)));
            }
        }
        Ok((Tensor::new(&shape, data)?, self.id, rhs.id))
    }

    pub fn add(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, a, b) = self.binary(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, a, b) = self.binary(rhs, "sub", |x, y| x - y)?;
        Ok(self.tape.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, a, b) = self.binary(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * s).collect();
        let v = Tensor::new(a.shape(), data).unwrap();
        self.tape.record(v, Op::Scale(self.id, s), &[self.id])
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x + s).collect();
        let v = Tensor::new(a.shape(), data).unwrap();
        self.tape.record(v, Op::Offset(self.id), &[self.id])
    }

    fn unary(&self, kind: Unary) -> Var<'t, T> {
        let a = self.value();
        let x = a.data().iter();
        let data = match kind {
            Unary::Relu => x.map(|&x| x.max(T::zero())).collect(),
            Unary::Gelu => {
                let tanh: Vec<T> = x.map(|&x| gelu_tanh(x)).collect();
                let half = T::from_f64_lossy(0.5);
                let data = a
                    .data()
                    .iter()
                    .zip(&tanh)
                    .map(|(&x, &t)| half * x * (T::one() + t))
                    .collect();
                let v = Tensor::new(a.shape(), data).unwrap();
                return self
                    .tape
                    .record(v, Op::Gelu { a: self.id, tanh }, &[self.id]);
            }
            Unary::Tanh => x.map(|&x| x.tanh()).collect(),
            Unary::Sigmoid => x.map(|&x| T::one() / (T::one() + (-x).exp())).collect(),
        };
        let v = Tensor::new(a.shape(), data).unwrap();
        self.tape.record(v, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Unary::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(shape)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis("softmax", axis)?;
        let a = self.value();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = a.data();
        let mut y = vec![T::zero(); x.len()];
        if inner == 1 {
            for (xr, yr) in x.chunks(len.max(1)).zip(y.chunks_mut(len.max(1))) {
                let mx = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for (yv, &xv) in yr.iter_mut().zip(xr) {
                    *yv = (xv - mx).exp();
                    sum += *yv;
                }
                let r = T::one() / sum;
                yr.iter_mut().for_each(|v| *v *= r);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        mx = mx.max(x[base + j * inner]);
                    }
                    let mut sum = T::zero();
                    for j in 0..len {
                        let e = (x[base + j * inner] - mx).exp();
                        y[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        y[base + j * inner] /= sum;
                    }
                }
            }
        }
        let v = Tensor::new(&shape, y)?;
        Ok(self
            .tape
            .record(v, Op::Softmax { a: self.id, axis }, &[self.id]))
    }

    /// Maximum along `axis` (the axis is removed). Gradient routes to the
    /// first maximal entry of each lane.
    pub fn reduce_max(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis("reduce_max", axis)?;
        let a = self.value();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = a.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        if len > 0 {
            for o in 0..outer {
                let base = o * len * inner;
                let start = out.len();
                out.extend_from_slice(&x[base..base + inner]);
                argmax.extend(base..base + inner);
                for j in 1..len {
                    let row = &x[base + j * inner..base + (j + 1) * inner];
                    for (i, &v) in row.iter().enumerate() {
                        if v > out[start + i] {
                            out[start + i] = v;
                            argmax[start + i] = base + j * inner + i;
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = Tensor::new(&out_shape, out)?;
        Ok(self
            .tape
            .record(v, Op::ReduceMax { a: self.id, argmax }, &[self.id]))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.tape
            .record(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis("sum_axis", axis)?;
        let a = self.value();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = a.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = Tensor::new(&out_shape, out)?;
        Ok(self
            .tape
            .record(v, Op::SumAxis { a: self.id, axis }, &[self.id]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let len = self.check_axis("mean_axis", axis)?[axis];
        Ok(self
            .sum_axis(axis)?
            .scale(T::one() / T::from_usize(len).unwrap()))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?;
        let base = first.check_axis("concat", axis)?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = Tensor::new(&shape, out)?;
        Ok(first.tape.record(
            v,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Selects `indices` along `axis`; repeated indices are allowed.
    pub fn gather(&self, indices: &[usize], axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis("gather", axis)?;
        if indices.is_empty() {
            return Err(TensorError::Empty("gather"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                extent: len,
            });
        }
        let a = self.value();
        let x = a.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let s = (o * len + ix) * inner;
                out.extend_from_slice(&x[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.tape.record(
            v,
            Op::Gather {
                a: self.id,
                axis,
                indices: indices.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let c = *shape.last().ok_or(TensorError::Empty("layer_norm"))?;
        let (gs, bs) = (gamma.shape(), beta.shape());
        if gs != [c] || bs != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gs,
            });
        }
        let a = self.value();
        let x = a.data();
        let gv = gamma.value();
        let bv = beta.value();
        let rows = x.len() / c;
        let cn = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let v = Tensor::new(&shape, y)?;
        Ok(self.tape.record(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        check_shape(shape)?;
        let a = self.value();
        if numel(shape) != a.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = Tensor::new(shape, a.data().to_vec())?;
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidShape {
                shape: shape.clone(),
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let a = self.value();
        let data = permute_data(a.data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.tape.record(
            v,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                shape: self.shape(),
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Euclidean norm over the last axis (the axis is removed). The gradient at a zero row is zero.
    pub fn row_norm(&self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let w = *shape.last().ok_or(TensorError::Empty("row_norm"))?;
        let a = self.value();
        let data: Vec<T> = a
            .data()
            .chunks(w)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let out_shape = &shape[..shape.len() - 1];
        let v = Tensor::new(out_shape, data)?;
        Ok(self.tape.record(v, Op::RowNorm(self.id), &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_product() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let tape = Tape::new();
        let id = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_data = [0.5, -1.0, 2.0, 3.0, 4.0, -5.0, 6.0, 7.5, 8.0];
        let a = tape.constant(t(&[3, 3], &a_data));
        assert_eq!(id.matmul(a).unwrap().value().data(), &a_data);
        let bad = tape.constant(t(&[2, 2], &[1.0; 4]));
        let err = a.matmul(bad).unwrap_err();
        assert!(err.to_string().contains("[3, 3]") && err.to_string().contains("[2, 2]"));
    }

    #[test]
    fn sum_of_product_gradient_is_column_sums() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3, 2], &[1., -2., 0.5, 4., 3., 1.]));
        let loss = a.matmul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        // d/dA sum(AB) = 1 * B^T: every row equals the row sums of B.
        assert_eq!(g.get(a).unwrap(), &[-1., 4.5, 4., -1., 4.5, 4.]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn relu_and_add_zero() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 3.0]);
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.add(z).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0; 6]));
        let bias = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(
            x.add(bias).unwrap().value().data(),
            &[2., 3., 4., 2., 3., 4.]
        );
        let col = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        assert!(matches!(x.add(col), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        for v in x.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
        assert_eq!(big.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn reduce_max_single_row_and_ties() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[1.0, -2.0, 5.0]));
        assert_eq!(x.reduce_max(0).unwrap().value().data(), &[1.0, -2.0, 5.0]);
        let y = tape.leaf(t(&[3, 1], &[2.0, 2.0, 1.0]));
        let m = y.reduce_max(0).unwrap();
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.get(y).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_gather_shapes() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0; 6]));
        let b = tape.constant(t(&[2, 1], &[2.0; 2]));
        assert_eq!(Var::concat(&[a, b], 1).unwrap().shape(), vec![2, 4]);
        let c = tape.constant(t(&[3, 1], &[10.0, 20.0, 30.0]));
        assert_eq!(c.gather(&[2, 0], 0).unwrap().value().data(), &[30.0, 10.0]);
        assert!(matches!(
            c.gather(&[3], 0),
            Err(TensorError::IndexOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn layer_norm_centers_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -4.0, 0.5, 0.25, 8.0]));
        let g = tape.constant(t(&[4], &[1.0; 4]));
        let b = tape.constant(t(&[4], &[0.0; 4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        for r in 0..2 {
            let row = y.row(r);
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-7);
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        {
            let x = tape.leaf(Tensor::scalar(2.0));
            let y = x.mul(x).unwrap();
            let g = tape.backward(y).unwrap();
            assert_eq!(g.get(x).unwrap(), &[4.0]);
            assert!(matches!(tape.backward(y), Err(TensorError::TapeConsumed)));
        }
        tape.reset();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarBackward(_))
        ));
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64).unwrap());
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        // p[c][a][b] == x[a][b][c]
        assert_eq!(
            p.value().data()[1 * 6 + 1 * 3 + 2],
            x.value().data()[1 * 12 + 2 * 4 + 1]
        );
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn row_norm_zero_row_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.0, 0.0, 0.0, 3.0, 4.0, 0.0]));
        let n = x.row_norm().unwrap();
        assert_eq!(n.value().data(), &[0.0, 5.0]);
        let g = tape.backward(n.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 0.0, 0.6, 0.8, 0.0]);
    }
}
