//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; calling
//! [`Tape::backward`] on a scalar walks the nodes in reverse and returns the
//! gradient of every tracked node. Nodes whose inputs are all untracked are
//! recorded as constants and never receive a gradient, which is how frozen
//! parameters are kept out of the update.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::conv;
use crate::scalar::gemm;
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Square(usize),
    Abs(usize),
    Clamp(usize, T, T),
    ChannelBias(usize, usize),
    BroadcastSpatial(usize),
    Sum(usize),
    SumSpatial(usize),
    SumPerSample(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a tracked variable; `None` for constants or variables the
    /// loss does not depend on.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materialises zeros for missing gradients.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn dim1(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected rank ≥ 2, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// A value that receives gradients.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenation along axis 1 of tensors shaped `[N, C_i, ...]`.
    pub fn concat(&self, parts: &[Var<'_, T>]) -> Var<'_, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let (n, _, inner) = dim1(&first);
        let mut channels = 0;
        for v in &values {
            let (vn, vc, vi) = dim1(v.shape());
            assert!(
                vn == n && vi == inner && v.shape()[2..] == first[2..],
                "concat shape mismatch {:?} vs {:?}",
                v.shape(),
                first
            );
            channels += vc;
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for v in &values {
                data.extend_from_slice(v.outer(i));
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let tracked = parts.iter().any(|p| self.tracked(p.id));
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            tracked,
        )
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if !nodes[root.id].tracked {
            return Grads { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            let need = |i: usize| nodes[i].tracked;
            if matches!(node.op, Op::Leaf) {
                // keep leaf gradients for the caller
                grads[id] = Some(g);
                continue;
            }
            macro_rules! acc {
                ($i:expr, $t:expr $(,)?) => {
                    accumulate(&mut grads, &nodes, $i, $t)
                };
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::Add(a, b) => {
                    if need(b) {
                        acc!(b, g.clone());
                    }
                    acc!(a, g);
                }
                &Op::Sub(a, b) => {
                    if need(b) {
                        acc!(b, g.map(|v| -v));
                    }
                    acc!(a, g);
                }
                &Op::Mul(a, b) => {
                    if need(a) {
                        acc!(a, g.zip_map(val(b), |gv, bv| gv * bv));
                    }
                    if need(b) {
                        acc!(b, g.zip_map(val(a), |gv, av| gv * av));
                    }
                }
                &Op::Div(a, b) => {
                    if need(a) {
                        acc!(a, g.zip_map(val(b), |gv, bv| gv / bv));
                    }
                    if need(b) {
                        // d(a/b)/db = -out / b
                        let t = g
                            .zip_map(out, |gv, o| gv * o)
                            .zip_map(val(b), |v, bv| -v / bv);
                        acc!(b, t);
                    }
                }
                &Op::Neg(a) => acc!(a, g.map(|v| -v)),
                &Op::Scale(a, c) => acc!(a, g.map(|v| v * c)),
                &Op::AddScalar(a) => acc!(a, g),
                &Op::Relu(a) => acc!(
                    a,
                    g.zip_map(val(a), |gv, x| if x > T::zero() { gv } else { T::zero() }),
                ),
                &Op::LeakyRelu(a, slope) => acc!(
                    a,
                    g.zip_map(val(a), |gv, x| if x > T::zero() { gv } else { gv * slope }),
                ),
                &Op::Sigmoid(a) => acc!(a, g.zip_map(out, |gv, s| gv * s * (T::one() - s))),
                &Op::Tanh(a) => acc!(a, g.zip_map(out, |gv, t| gv * (T::one() - t * t))),
                &Op::Exp(a) => acc!(a, g.zip_map(out, |gv, e| gv * e)),
                &Op::Ln(a) => acc!(a, g.zip_map(val(a), |gv, x| gv / x)),
                &Op::Softplus(a) => acc!(a, g.zip_map(val(a), |gv, x| gv * sigmoid(x))),
                &Op::Square(a) => acc!(a, g.zip_map(val(a), |gv, x| gv * (x + x))),
                &Op::Abs(a) => acc!(a, g.zip_map(val(a), |gv, x| gv * x.signum())),
                &Op::Clamp(a, lo, hi) => acc!(
                    a,
                    g.zip_map(val(a), |gv, x| if x < lo || x > hi { T::zero() } else { gv }),
                ),
                &Op::ChannelBias(x, b) => {
                    if need(b) {
                        let (n, c, inner) = dim1(g.shape());
                        let mut db = Tensor::zeros(&[c]);
                        for i in 0..n {
                            for ch in 0..c {
                                let s = (i * c + ch) * inner;
                                db.data_mut()[ch] += g.data()[s..s + inner].iter().copied().sum();
                            }
                        }
                        acc!(b, db);
                    }
                    acc!(x, g);
                }
                &Op::BroadcastSpatial(x) => {
                    let (n, p, inner) = dim1(g.shape());
                    let mut dx = Tensor::zeros(&[n, p]);
                    for (j, chunk) in g.data().chunks(inner).enumerate() {
                        dx.data_mut()[j] = chunk.iter().copied().sum();
                    }
                    acc!(x, dx);
                }
                &Op::Sum(a) => {
                    let gv = g.item();
                    acc!(a, Tensor::full(val(a).shape(), gv));
                }
                &Op::SumSpatial(a) => {
                    let shape = val(a).shape().to_vec();
                    let (_, _, inner) = dim1(&shape);
                    let mut dx = Tensor::zeros(&shape);
                    for (chunk, &gv) in dx.data_mut().chunks_mut(inner).zip(g.data()) {
                        chunk.iter_mut().for_each(|v| *v = gv);
                    }
                    acc!(a, dx);
                }
                &Op::SumPerSample(a) => {
                    let shape = val(a).shape().to_vec();
                    let per = shape[1..].iter().product::<usize>();
                    let mut dx = Tensor::zeros(&shape);
                    for (chunk, &gv) in dx.data_mut().chunks_mut(per).zip(g.data()) {
                        chunk.iter_mut().for_each(|v| *v = gv);
                    }
                    acc!(a, dx);
                }
                &Op::Reshape(a) => {
                    let shape = val(a).shape().to_vec();
                    acc!(a, g.reshape(&shape));
                }
                Op::Concat(parts) => {
                    let (n, total, inner) = dim1(g.shape());
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let c = shape[1];
                        if need(p) {
                            let mut dp = Vec::with_capacity(n * c * inner);
                            for i in 0..n {
                                let s = (i * total + offset) * inner;
                                dp.extend_from_slice(&g.data()[s..s + c * inner]);
                            }
                            acc!(p, Tensor::from_vec(&shape, dp));
                        }
                        offset += c;
                    }
                }
                &Op::Slice(a, start) => {
                    let shape = val(a).shape().to_vec();
                    let (n, c, inner) = dim1(&shape);
                    let len = g.shape()[1];
                    let mut dx = Tensor::zeros(&shape);
                    for i in 0..n {
                        let d = (i * c + start) * inner;
                        let s = i * len * inner;
                        dx.data_mut()[d..d + len * inner]
                            .copy_from_slice(&g.data()[s..s + len * inner]);
                    }
                    acc!(a, dx);
                }
                &Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let r = conv::conv2d_backward(
                        val(x),
                        val(w),
                        &g,
                        stride,
                        pad,
                        (need(x), need(w), b.is_some_and(need)),
                    );
                    if let Some(dx) = r.dx {
                        acc!(x, dx);
                    }
                    if let Some(dw) = r.dw {
                        acc!(w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, r.db) {
                        acc!(b, db);
                    }
                }
                &Op::AvgPool2(a) => {
                    let shape = val(a).shape().to_vec();
                    acc!(a, conv::avg_pool2_backward(&g, &shape));
                }
                &Op::Upsample2(a) => {
                    let shape = val(a).shape().to_vec();
                    acc!(a, conv::upsample2_backward(&g, &shape));
                }
                &Op::Linear { x, w, b } => {
                    let xv = val(x);
                    let wv = val(w);
                    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    if need(x) {
                        let mut dx = Tensor::zeros(&[n, fin]);
                        gemm(n, fout, fin, g.data(), (fout, 1), wv.data(), (fin, 1), dx.data_mut(), (fin, 1), false);
                        acc!(x, dx);
                    }
                    if need(w) {
                        let mut dw = Tensor::zeros(&[fout, fin]);
                        gemm(fout, n, fin, g.data(), (1, fout), xv.data(), (fin, 1), dw.data_mut(), (fin, 1), false);
                        acc!(w, dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        let mut db = Tensor::zeros(&[fout]);
                        for row in g.data().chunks(fout) {
                            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc!(b, db);
                    }
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    i: usize,
    t: Tensor<T>,
) {
    if !nodes[i].tracked {
        return;
    }
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn tracked_with(&self, other: &Self) -> bool {
        self.is_tracked() || other.is_tracked()
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let v = self.value().map(f);
        self.tape.push(v, op, self.is_tracked())
    }

    fn binary(&self, other: &Self, op: Op<T>, f: impl Fn(T, T) -> T) -> Self {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
        let v = self.value().zip_map(&other.value(), f);
        self.tape.push(v, op, self.tracked_with(other))
    }

    /// Copy of the value that is cut off from the graph.
    pub fn detach(&self) -> Self {
        self.tape.constant((*self.value()).clone())
    }

    pub fn scale(&self, c: T) -> Self {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn relu(&self) -> Self {
        self.unary(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        self.unary(Op::LeakyRelu(self.id, slope), |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn exp(&self) -> Self {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn ln(&self) -> Self {
        self.unary(Op::Ln(self.id), |v| v.ln())
    }

    pub fn softplus(&self) -> Self {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(&self) -> Self {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn abs(&self) -> Self {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.unary(Op::Clamp(self.id, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Adds a per-channel bias `[C]` to a `[N, C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: Self) -> Self {
        let x = self.value();
        let b = bias.value();
        let (_, c, inner) = dim1(x.shape());
        assert_eq!(b.shape(), &[c], "channel bias shape mismatch");
        let mut out = (*x).clone();
        for (j, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b.data()[j % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.tape
            .push(out, Op::ChannelBias(self.id, bias.id), self.tracked_with(&bias))
    }

    /// `[N, P]` → `[N, P, H, W]` by spatial replication.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Self {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "broadcast_spatial expects [N, P]");
        let (n, p) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(n * p * h * w);
        for &v in x.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        self.tape.push(
            Tensor::from_vec(&[n, p, h, w], data),
            Op::BroadcastSpatial(self.id),
            self.is_tracked(),
        )
    }

    pub fn sum(&self) -> Self {
        let s = self.value().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.is_tracked())
    }

    pub fn mean(&self) -> Self {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// `[N, C, ...]` → `[N, C]` summing everything past axis 1.
    pub fn sum_spatial(&self) -> Self {
        let x = self.value();
        let (n, c, inner) = dim1(x.shape());
        let data = x.data().chunks(inner).map(|ch| ch.iter().copied().sum()).collect();
        self.tape.push(
            Tensor::from_vec(&[n, c], data),
            Op::SumSpatial(self.id),
            self.is_tracked(),
        )
    }

    pub fn mean_spatial(&self) -> Self {
        let shape = self.shape();
        let inner: usize = shape[2..].iter().product();
        self.sum_spatial().scale(T::one() / T::from_usize(inner).unwrap())
    }

    /// `[N, ...]` → `[N]`.
    pub fn sum_per_sample(&self) -> Self {
        let x = self.value();
        let n = x.shape()[0];
        let per = x.len() / n.max(1);
        let data = x.data().chunks(per).map(|ch| ch.iter().copied().sum()).collect();
        self.tape.push(
            Tensor::from_vec(&[n], data),
            Op::SumPerSample(self.id),
            self.is_tracked(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let v = (*self.value()).clone().reshape(shape);
        self.tape.push(v, Op::Reshape(self.id), self.is_tracked())
    }

    /// Channels `[start, start + len)` along axis 1.
    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let x = self.value();
        let (n, c, inner) = dim1(x.shape());
        assert!(start + len <= c, "slice {start}+{len} exceeds {c} channels");
        let mut data = Vec::with_capacity(n * len * inner);
        for i in 0..n {
            let s = (i * c + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = len;
        self.tape.push(
            Tensor::from_vec(&shape, data),
            Op::Slice(self.id, start),
            self.is_tracked(),
        )
    }

    /// 2D cross-correlation of `[N, C, H, W]` with weights `[O, C, K, K]`.
    pub fn conv2d(&self, w: Self, b: Option<Self>, stride: usize, pad: usize) -> Self {
        let bv = b.map(|b| b.value());
        let out = conv::conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad);
        let tracked = self.is_tracked() || w.is_tracked() || b.is_some_and(|b| b.is_tracked());
        self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
            tracked,
        )
    }

    pub fn avg_pool2(&self) -> Self {
        let out = conv::avg_pool2(&self.value());
        self.tape.push(out, Op::AvgPool2(self.id), self.is_tracked())
    }

    pub fn upsample2(&self) -> Self {
        let out = conv::upsample2(&self.value());
        self.tape.push(out, Op::Upsample2(self.id), self.is_tracked())
    }

    /// `[N, in]` × `[out, in]ᵀ` (+ `[out]`).
    pub fn linear(&self, w: Self, b: Option<Self>) -> Self {
        let x = self.value();
        let wv = w.value();
        assert_eq!(x.shape().len(), 2, "linear input must be [N, in]");
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        assert_eq!(wv.shape()[1], fin, "linear weight mismatch");
        let fout = wv.shape()[0];
        let mut out = Tensor::zeros(&[n, fout]);
        if let Some(b) = b {
            let bv = b.value();
            for row in out.data_mut().chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, fin, fout, x.data(), (fin, 1), wv.data(), (1, fin), out.data_mut(), (fout, 1), b.is_some());
        let tracked = self.is_tracked() || w.is_tracked() || b.is_some_and(|b| b.is_tracked());
        self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            tracked,
        )
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t, T: Scalar> ops::$trait for Var<'t, T> {
            type Output = Var<'t, T>;
            fn $method(self, rhs: Self) -> Self::Output {
                self.binary(&rhs, Op::$variant(self.id, rhs.id), $f)
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t, T: Scalar> ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.unary(Op::Neg(self.id), |v| -v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.var(Tensor::from_f64(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::from_f64(&[2], &[3.0, 4.0]));
        let loss = (w * c).sum();
        let g = tape.backward(loss);
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn untracked_graph_records_leaves_only() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]));
        let b = a.relu().square().sum();
        assert!(!b.is_tracked());
        assert_eq!(b.item(), 10.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = (x * x + x).sum(); // d/dx = 2x + 1
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
