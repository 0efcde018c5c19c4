use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div { a: usize, b: usize, eps: f64 },
    AddScalar(usize),
    MulScalar(usize, f64),
    Neg(usize),
    Exp(usize),
    Log { x: usize, eps: f64 },
    LogMasked(usize),
    Sqrt { x: usize },
    Square(usize),
    Abs(usize),
    Sigmoid(usize),
    Silu(usize),
    Relu(usize),
    Softplus(usize),
    Logit { x: usize, eps: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    Reshape(usize),
    Transpose { x: usize, rows: usize, cols: usize },
    BroadcastTo(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    MaxAxis { x: usize, arg: Vec<usize> },
    Softmax { x: usize, axis: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, out_c: usize, cols: Vec<f64> },
    AdaptiveAvgPool { x: usize, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    Upsample { x: usize, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    WindowMax { x: usize, arg: Vec<usize> },
    BoxMean { x: usize, planes: usize, h: usize, w: usize, r: usize },
    WindowMeanValid { x: usize, planes: usize, h: usize, w: usize, kh: usize, kw: usize },
    DiffX { x: usize, w: usize },
    DiffY { x: usize, h: usize, w: usize },
    SplineBasis { x: usize, deriv: Vec<f64> },
}

/// Ordered record of operations; parents always precede children.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    no_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Vec<f64>>,
    by_param: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.by_node.get(&v.id).map(Vec::as_slice)
    }

    /// Gradient for a parameter leaf, summed over every time it was placed on the tape.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for (pid, node) in &self.by_param {
            if *pid != id {
                continue;
            }
            if let Some(g) = self.by_node.get(node) {
                match &mut acc {
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_param.iter().map(|(p, _)| *p)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::default(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf; it tracks gradients if `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Places a stored parameter on the tape as a gradient-tracking leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes.borrow_mut()[v.id].param = Some(id);
        v
    }

    pub(crate) fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every tracked leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(p) = node.param {
                    out.by_param.push((p, id));
                }
                out.by_node.insert(id, g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce() -> Vec<f64>) {
    if nodes[id].requires_grad {
        acc(grads, nodes, id, f());
    }
}

fn unary(nodes: &[Node], x: usize, g: &[f64], f: impl Fn(f64, f64, f64) -> f64, y: &[f64]) -> Vec<f64> {
    let xv = &nodes[x].value;
    g.iter()
        .zip(xv)
        .zip(y)
        .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
        .collect()
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    let out_shape = &node.shape;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_with(grads, nodes, *a, || kernels::reduce_to(g, out_shape, &nodes[*a].shape));
            acc_with(grads, nodes, *b, || kernels::reduce_to(g, out_shape, &nodes[*b].shape));
        }
        Op::Sub(a, b) => {
            acc_with(grads, nodes, *a, || kernels::reduce_to(g, out_shape, &nodes[*a].shape));
            acc_with(grads, nodes, *b, || {
                kernels::reduce_to(g, out_shape, &nodes[*b].shape).into_iter().map(|v| -v).collect()
            });
        }
        Op::Mul(a, b) => {
            let (sa, sb) = (
                kernels::broadcast_strides(&nodes[*a].shape, out_shape),
                kernels::broadcast_strides(&nodes[*b].shape, out_shape),
            );
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; av.len()];
                kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| ga[ia] += g[o] * bv[ib]);
                acc(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; bv.len()];
                kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| gb[ib] += g[o] * av[ia]);
                acc(grads, nodes, *b, gb);
            }
        }
        Op::Div { a, b, eps } => {
            let (sa, sb) = (
                kernels::broadcast_strides(&nodes[*a].shape, out_shape),
                kernels::broadcast_strides(&nodes[*b].shape, out_shape),
            );
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; av.len()];
                kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| ga[ia] += g[o] / (bv[ib] + eps));
                acc(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; bv.len()];
                kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                    let d = bv[ib] + eps;
                    gb[ib] -= g[o] * av[ia] / (d * d);
                });
                acc(grads, nodes, *b, gb);
            }
        }
        Op::AddScalar(x) => acc(grads, nodes, *x, g.to_vec()),
        Op::MulScalar(x, c) => acc(grads, nodes, *x, g.iter().map(|v| v * c).collect()),
        Op::Neg(x) => acc(grads, nodes, *x, g.iter().map(|v| -v).collect()),
        Op::Exp(x) => acc(grads, nodes, *x, g.iter().zip(y).map(|(a, b)| a * b).collect()),
        Op::Log { x, eps } => {
            let d = unary(nodes, *x, g, |gi, xi, _| gi / (xi + eps), y);
            acc(grads, nodes, *x, d);
        }
        Op::LogMasked(x) => {
            let d = unary(
                nodes,
                *x,
                g,
                |gi, xi, _| if xi > f64::MIN_POSITIVE && gi != 0.0 { gi / xi } else { 0.0 },
                y,
            );
            acc(grads, nodes, *x, d);
        }
        Op::Sqrt { x } => {
            let d = unary(nodes, *x, g, |gi, _, yi| if gi == 0.0 { 0.0 } else { gi * 0.5 / yi }, y);
            acc(grads, nodes, *x, d);
        }
        Op::Square(x) => acc(grads, nodes, *x, unary(nodes, *x, g, |gi, xi, _| 2.0 * gi * xi, y)),
        Op::Abs(x) => acc(grads, nodes, *x, unary(nodes, *x, g, |gi, xi, _| gi * sign(xi), y)),
        Op::Sigmoid(x) => acc(grads, nodes, *x, unary(nodes, *x, g, |gi, _, yi| gi * yi * (1.0 - yi), y)),
        Op::Silu(x) => {
            let d = unary(
                nodes,
                *x,
                g,
                |gi, xi, _| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (1.0 - s))
                },
                y,
            );
            acc(grads, nodes, *x, d);
        }
        Op::Relu(x) => acc(grads, nodes, *x, unary(nodes, *x, g, |gi, xi, _| if xi > 0.0 { gi } else { 0.0 }, y)),
        Op::Softplus(x) => acc(grads, nodes, *x, unary(nodes, *x, g, |gi, xi, _| gi * sigmoid(xi), y)),
        Op::Logit { x, eps } => {
            let d = unary(
                nodes,
                *x,
                g,
                |gi, xi, _| {
                    if xi < *eps || xi > 1.0 - eps {
                        0.0
                    } else {
                        gi / (xi * (1.0 - xi))
                    }
                },
                y,
            );
            acc(grads, nodes, *x, d);
        }
        Op::Clamp { x, lo, hi } => {
            let d = unary(nodes, *x, g, |gi, xi, _| if xi < *lo || xi > *hi { 0.0 } else { gi }, y);
            acc(grads, nodes, *x, d);
        }
        Op::Reshape(x) => acc(grads, nodes, *x, g.to_vec()),
        Op::Transpose { x, rows, cols } => {
            let mut d = vec![0.0; g.len()];
            for i in 0..*rows {
                for j in 0..*cols {
                    d[i * cols + j] = g[j * rows + i];
                }
            }
            acc(grads, nodes, *x, d);
        }
        Op::BroadcastTo(x) => acc_with(grads, nodes, *x, || kernels::reduce_to(g, out_shape, &nodes[*x].shape)),
        Op::Concat { parts, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                if nodes[p].requires_grad {
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                        d[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                    }
                    acc(grads, nodes, p, d);
                }
                off += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = &nodes[*x].shape;
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let (total, len) = (xs[*axis], out_shape[*axis]);
            let mut d = vec![0.0; nodes[*x].value.len()];
            for o in 0..outer {
                d[(o * total + start) * inner..(o * total + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            acc(grads, nodes, *x, d);
        }
        Op::Sum(x) => acc(grads, nodes, *x, vec![g[0]; nodes[*x].value.len()]),
        Op::Mean(x) => {
            let n = nodes[*x].value.len();
            acc(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis { x, axis } => {
            let xs = &nodes[*x].shape;
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let n = xs[*axis];
            let mut d = vec![0.0; nodes[*x].value.len()];
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut d[(o * n + k) * inner..(o * n + k + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            acc(grads, nodes, *x, d);
        }
        Op::MaxAxis { x, arg, .. } | Op::WindowMax { x, arg } => {
            let mut d = vec![0.0; nodes[*x].value.len()];
            for (gi, &a) in g.iter().zip(arg) {
                d[a] += gi;
            }
            acc(grads, nodes, *x, d);
        }
        Op::Softmax { x, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let n = out_shape[*axis];
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                    for k in 0..n {
                        d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            acc(grads, nodes, *x, d);
        }
        Op::Matmul { a, b, m, k, n } => {
            acc_with(grads, nodes, *a, || kernels::matmul_nt(g, &nodes[*b].value, *m, *n, *k));
            acc_with(grads, nodes, *b, || kernels::matmul_tn(&nodes[*a].value, g, *m, *k, *n));
        }
        Op::Conv2d { x, w, b, geom, out_c, cols } => {
            let ckk = geom.c * geom.kh * geom.kw;
            let hw = geom.oh * geom.ow;
            if let Some(b) = b {
                acc_with(grads, nodes, *b, || (0..*out_c).map(|o| g[o * hw..(o + 1) * hw].iter().sum()).collect());
            }
            acc_with(grads, nodes, *w, || kernels::matmul_nt(g, cols, *out_c, hw, ckk));
            acc_with(grads, nodes, *x, || {
                let dcols = kernels::matmul_tn(&nodes[*w].value, g, *out_c, ckk, hw);
                kernels::col2im(&dcols, *geom)
            });
        }
        Op::AdaptiveAvgPool { x, planes, h, w, oh, ow } => {
            acc(grads, nodes, *x, kernels::adaptive_avg_pool_backward(g, *planes, *h, *w, *oh, *ow));
        }
        Op::Upsample { x, planes, h, w, oh, ow } => {
            let mut d = vec![0.0; planes * h * w];
            for p in 0..*planes {
                for i in 0..*oh {
                    let si = kernels::nearest_src(i, *h, *oh);
                    for j in 0..*ow {
                        let sj = kernels::nearest_src(j, *w, *ow);
                        d[(p * h + si) * w + sj] += g[(p * oh + i) * ow + j];
                    }
                }
            }
            acc(grads, nodes, *x, d);
        }
        Op::BoxMean { x, planes, h, w, r } => {
            let cnt = kernels::box_counts(*h, *w, *r);
            let scaled: Vec<f64> = g.iter().enumerate().map(|(i, v)| v / cnt[i % (h * w)]).collect();
            acc(grads, nodes, *x, kernels::box_sum(&scaled, *planes, *h, *w, *r));
        }
        Op::WindowMeanValid { x, planes, h, w, kh, kw } => {
            acc(grads, nodes, *x, kernels::window_mean_valid_backward(g, *planes, *h, *w, *kh, *kw));
        }
        Op::DiffX { x, w } => {
            let mut d = vec![0.0; g.len()];
            for (row_g, row_d) in g.chunks(*w).zip(d.chunks_mut(*w)) {
                for j in 0..w - 1 {
                    row_d[j + 1] += row_g[j];
                    row_d[j] -= row_g[j];
                }
            }
            acc(grads, nodes, *x, d);
        }
        Op::DiffY { x, h, w } => {
            let mut d = vec![0.0; g.len()];
            for (pg, pd) in g.chunks(h * w).zip(d.chunks_mut(h * w)) {
                for i in 0..h - 1 {
                    for j in 0..*w {
                        pd[(i + 1) * w + j] += pg[i * w + j];
                        pd[i * w + j] -= pg[i * w + j];
                    }
                }
            }
            acc(grads, nodes, *x, d);
        }
        Op::SplineBasis { x, deriv } => {
            let nb = deriv.len() / nodes[*x].value.len();
            let d = g.chunks(nb).zip(deriv.chunks(nb)).map(|(gc, dc)| gc.iter().zip(dc).map(|(a, b)| a * b).sum()).collect();
            acc(grads, nodes, *x, d);
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }
}
