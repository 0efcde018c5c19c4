//! Forward definitions of every differentiable primitive.

use super::kernels::{self, ConvGeom};
use super::tape::{sigmoid, Op, Var};
use crate::error::{Error, Result};
use crate::kan::SplineGrid;

/// Default guard for `div_eps`, `log_eps`, `sqrt_eps` and `std_eps`.
pub const DEFAULT_EPS: f64 = 1e-8;

fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(op, format!("needs at least 2 axes, got {shape:?}")));
    }
    let n = shape.len();
    let planes = shape[..n - 2].iter().product();
    Ok((planes, shape[n - 2], shape[n - 1]))
}

fn with_hw(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

impl<'t> Var<'t> {
    fn unary_op(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary_op(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        self.same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape == b.shape {
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            return Ok((a.shape.clone(), v));
        }
        let out = kernels::broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::shape(name, &a.shape, &b.shape))?;
        let sa = kernels::broadcast_strides(&a.shape, &out);
        let sb = kernels::broadcast_strides(&b.shape, &out);
        let mut v = vec![0.0; out.iter().product()];
        kernels::for_each_broadcast(&out, &sa, &sb, |o, ia, ib| v[o] = f(a.value[ia], b.value[ib]));
        Ok((out, v))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (s, v) = self.binary_op(other, "add", |a, b| a + b)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(s, v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (s, v) = self.binary_op(other, "sub", |a, b| a - b)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(s, v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (s, v) = self.binary_op(other, "mul", |a, b| a * b)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(s, v, Op::Mul(self.id, other.id), rg))
    }

    /// Elementwise division; any zero in the denominator is rejected.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if let Some(index) = other.value().iter().position(|&v| v == 0.0) {
            return Err(Error::DivisionByZero { op: "div", index });
        }
        self.div_eps(other, 0.0)
    }

    /// `self / (other + eps)`.
    pub fn div_eps(self, other: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (s, v) = self.binary_op(other, "div", |a, b| a / (b + eps))?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(s, v, Op::Div { a: self.id, b: other.id, eps }, rg))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary_op(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary_op(|v| v * c, Op::MulScalar(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary_op(|v| -v, Op::Neg(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_op(f64::exp, Op::Exp(self.id))
    }

    /// Natural log; non-positive inputs are rejected.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(index) = self.value().iter().position(|&v| v <= 0.0) {
            return Err(Error::invalid("log", format!("non-positive input at flat index {index}")));
        }
        Ok(self.log_eps(0.0))
    }

    /// `ln(x + eps)`.
    pub fn log_eps(self, eps: f64) -> Var<'t> {
        self.unary_op(|v| (v + eps).ln(), Op::Log { x: self.id, eps })
    }

    /// `ln(x)` for positive entries, `-inf` elsewhere (a hard mask for softmax logits).
    pub fn log_masked(self) -> Var<'t> {
        self.unary_op(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }, Op::LogMasked(self.id))
    }

    /// Square root; negative inputs are rejected.
    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some(index) = self.value().iter().position(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt", format!("negative input at flat index {index}")));
        }
        Ok(self.sqrt_eps(0.0))
    }

    /// `sqrt(max(x, 0) + eps)`.
    pub fn sqrt_eps(self, eps: f64) -> Var<'t> {
        self.unary_op(|v| (v.max(0.0) + eps).sqrt(), Op::Sqrt { x: self.id })
    }

    pub fn square(self) -> Var<'t> {
        self.unary_op(|v| v * v, Op::Square(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary_op(f64::abs, Op::Abs(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_op(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary_op(|v| v * sigmoid(v), Op::Silu(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_op(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary_op(|v| if v > 30.0 { v } else { v.exp().ln_1p() }, Op::Softplus(self.id))
    }

    /// `ln(x / (1 - x))` with `x` clamped into `[eps, 1 - eps]`.
    pub fn logit_eps(self, eps: f64) -> Var<'t> {
        self.unary_op(
            |v| {
                let c = v.clamp(eps, 1.0 - eps);
                c.ln() - (1.0 - c).ln()
            },
            Op::Logit { x: self.id, eps },
        )
    }

    /// Identity inside `[lo, hi]` with zero gradient outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary_op(|v| v.clamp(lo, hi), Op::Clamp { x: self.id, lo, hi })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        let (old, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        if n != value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &old, shape));
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Transpose of a 2-D value.
    pub fn t(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("transpose", format!("needs 2 axes, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = {
            let x = self.value();
            let mut v = vec![0.0; x.len()];
            for i in 0..rows {
                for j in 0..cols {
                    v[j * rows + i] = x[i * cols + j];
                }
            }
            v
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(vec![cols, rows], v, Op::Transpose { x: self.id, rows, cols }, rg))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        match kernels::broadcast_shape(&src, shape) {
            Some(out) if out == shape => {}
            _ => return Err(Error::shape("broadcast_to", &src, shape)),
        }
        let strides = kernels::broadcast_strides(&src, shape);
        let zero = vec![0; shape.len()];
        let mut v = vec![0.0; shape.iter().product()];
        {
            let x = self.value();
            kernels::for_each_broadcast(shape, &strides, &zero, |o, ia, _| v[o] = x[ia]);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(shape.to_vec(), v, Op::BroadcastTo(self.id), rg))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let nodes = tape.nodes.borrow();
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            p.same_tape(first);
            let s = &nodes[p.id].shape;
            let compatible = s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut v = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &nodes[p.id];
                let len = n.shape[axis] * inner;
                v.extend_from_slice(&n.value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(shape, v, Op::Concat { parts: ids, axis }, rg))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid("narrow", format!("range {start}+{len} on axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis];
        let v = {
            let x = self.value();
            let mut v = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                v.extend_from_slice(&x[(o * total + start) * inner..(o * total + start + len) * inner]);
            }
            v
        };
        let mut out = shape;
        out[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, v, Op::Narrow { x: self.id, axis, start }, rg))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().iter().sum();
        let rg = self.requires_grad();
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let v = self.value();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let rg = self.requires_grad();
        self.tape.push(vec![1], vec![s], Op::Mean(self.id), rg)
    }

    /// Sum over `axis`, removing it (a 1-D input yields shape `[1]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let v = {
            let x = self.value();
            let mut v = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, s) in v[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            v
        };
        let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out.is_empty() {
            out.push(1);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(out, v, Op::SumAxis { x: self.id, axis }, rg))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / n as f64))
    }

    /// Max over `axis`; the gradient goes to the first maximal index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("max_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let (v, arg) = {
            let x = self.value();
            let mut v = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    for k in 0..n {
                        let idx = (o * n + k) * inner + i;
                        if x[idx] > v[o * inner + i] || k == 0 {
                            v[o * inner + i] = x[idx];
                            arg[o * inner + i] = idx;
                        }
                    }
                }
            }
            (v, arg)
        };
        let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out.is_empty() {
            out.push(1);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(out, v, Op::MaxAxis { x: self.id, arg }, rg))
    }

    /// Max over every element.
    pub fn max_all(self) -> Result<Var<'t>> {
        let n = self.len();
        self.reshape(&[n])?.max_axis(0)
    }

    /// Min over `axis`, routed through `max_axis` on the negation.
    pub fn min_axis(self, axis: usize) -> Result<Var<'t>> {
        Ok(self.neg().max_axis(axis)?.neg())
    }

    /// Softmax along `axis`. Rows whose logits are all `-inf` become all zero.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let v = {
            let x = self.value();
            let mut v = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    if m == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut s = 0.0;
                    for k in 0..n {
                        let e = (x[idx(k)] - m).exp();
                        v[idx(k)] = e;
                        s += e;
                    }
                    for k in 0..n {
                        v[idx(k)] /= s;
                    }
                }
            }
            v
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, v, Op::Softmax { x: self.id, axis }, rg))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = kernels::matmul(&self.value(), &other.value(), m, k, n);
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(vec![m, n], v, Op::Matmul { a: self.id, b: other.id, m, k, n }, rg))
    }

    /// Stride-1 2-D convolution of a `[C,H,W]` input with `[O,C,kh,kw]` weights.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            let bs = b.shape();
            if bs != [o] {
                return Err(Error::shape("conv2d bias", &bs, &[o]));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            pad: padding,
            oh: h + 2 * padding - kh + 1,
            ow: w + 2 * padding - kw + 1,
        };
        let cols = kernels::im2col(&self.value(), geom);
        let hw = geom.oh * geom.ow;
        let mut v = kernels::matmul(&weight.value(), &cols, o, c * kh * kw, hw);
        if let Some(b) = bias {
            let bv = b.value();
            for (oi, chunk) in v.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|x| *x += bv[oi]);
            }
        }
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let rg = self.tape.requires(&ids);
        let cols = if self.tape.requires(&[weight.id]) && rg { cols } else { Vec::new() };
        Ok(self.tape.push(
            vec![o, geom.oh, geom.ow],
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                out_c: o,
                cols,
            },
            rg,
        ))
    }

    /// Average pool over the last two axes partitioned into `oh × ow` cells.
    pub fn adaptive_avg_pool(self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, h, w) = spatial(&shape, "adaptive_avg_pool")?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::invalid("adaptive_avg_pool", format!("cannot pool {h}x{w} into {oh}x{ow}")));
        }
        let v = kernels::adaptive_avg_pool(&self.value(), planes, h, w, oh, ow);
        let rg = self.requires_grad();
        Ok(self.tape.push(with_hw(&shape, oh, ow), v, Op::AdaptiveAvgPool { x: self.id, planes, h, w, oh, ow }, rg))
    }

    /// Non-overlapping `k × k` average pool; extents must be divisible by `k`.
    pub fn avg_pool(self, k: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (_, h, w) = spatial(&shape, "avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::invalid("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        self.adaptive_avg_pool(h / k, w / k)
    }

    /// Mean over the last two axes: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, _, _) = spatial(&shape, "global_avg_pool")?;
        self.adaptive_avg_pool(1, 1)?.reshape(&[planes])
    }

    /// Nearest-neighbour resize of the last two axes.
    pub fn upsample_nearest(self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, h, w) = spatial(&shape, "upsample_nearest")?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("upsample_nearest", "zero output extent"));
        }
        let v = {
            let x = self.value();
            let mut v = vec![0.0; planes * oh * ow];
            for p in 0..planes {
                for i in 0..oh {
                    let si = kernels::nearest_src(i, h, oh);
                    for j in 0..ow {
                        v[(p * oh + i) * ow + j] = x[(p * h + si) * w + kernels::nearest_src(j, w, ow)];
                    }
                }
            }
            v
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(with_hw(&shape, oh, ow), v, Op::Upsample { x: self.id, planes, h, w, oh, ow }, rg))
    }

    /// Sliding `window × window` max (stride 1, same size, edge-truncated).
    pub fn window_max(self, window: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, h, w) = spatial(&shape, "window_max")?;
        if window == 0 || window % 2 == 0 {
            return Err(Error::invalid("window_max", format!("window must be odd and positive, got {window}")));
        }
        let (v, arg) = kernels::window_max(&self.value(), planes, h, w, window);
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, v, Op::WindowMax { x: self.id, arg }, rg))
    }

    pub fn window_min(self, window: usize) -> Result<Var<'t>> {
        Ok(self.neg().window_max(window)?.neg())
    }

    /// Edge-truncated mean over a `(2r+1)²` box.
    pub fn box_mean(self, r: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, h, w) = spatial(&shape, "box_mean")?;
        let cnt = kernels::box_counts(h, w, r);
        let mut v = kernels::box_sum(&self.value(), planes, h, w, r);
        for (i, x) in v.iter_mut().enumerate() {
            *x /= cnt[i % (h * w)];
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, v, Op::BoxMean { x: self.id, planes, h, w, r }, rg))
    }

    /// Mean over every fully contained `kh × kw` window.
    pub fn window_mean_valid(self, kh: usize, kw: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, h, w) = spatial(&shape, "window_mean_valid")?;
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::invalid("window_mean_valid", format!("{kh}x{kw} window on {h}x{w}")));
        }
        let v = kernels::window_mean_valid(&self.value(), planes, h, w, kh, kw);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            with_hw(&shape, h - kh + 1, w - kw + 1),
            v,
            Op::WindowMeanValid { x: self.id, planes, h, w, kh, kw },
            rg,
        ))
    }

    /// Forward difference along the last axis, `x[j+1] - x[j]`, zero in the last column.
    pub fn diff_x(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (_, _, w) = spatial(&shape, "diff_x")?;
        let v = {
            let x = self.value();
            let mut v = vec![0.0; x.len()];
            for (src, dst) in x.chunks(w).zip(v.chunks_mut(w)) {
                for j in 0..w - 1 {
                    dst[j] = src[j + 1] - src[j];
                }
            }
            v
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, v, Op::DiffX { x: self.id, w }, rg))
    }

    /// Forward difference along the second-to-last axis, zero in the last row.
    pub fn diff_y(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (_, h, w) = spatial(&shape, "diff_y")?;
        let v = {
            let x = self.value();
            let mut v = vec![0.0; x.len()];
            for (src, dst) in x.chunks(h * w).zip(v.chunks_mut(h * w)) {
                for i in 0..h - 1 {
                    for j in 0..w {
                        dst[i * w + j] = src[(i + 1) * w + j] - src[i * w + j];
                    }
                }
            }
            v
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, v, Op::DiffY { x: self.id, h, w }, rg))
    }

    /// Expands every element into its B-spline basis: shape `s -> s ++ [n_basis]`.
    pub fn spline_basis(self, grid: &SplineGrid) -> Var<'t> {
        let nb = grid.n_basis();
        let rg = self.requires_grad();
        let (shape, v, deriv) = {
            let x = self.value();
            let mut v = vec![0.0; x.len() * nb];
            let mut d = if rg { vec![0.0; x.len() * nb] } else { Vec::new() };
            for (i, &xi) in x.iter().enumerate() {
                let deriv = if rg { Some(&mut d[i * nb..(i + 1) * nb]) } else { None };
                grid.eval_into(xi, &mut v[i * nb..(i + 1) * nb], deriv);
            }
            let mut s = self.shape();
            s.push(nb);
            (s, v, d)
        };
        self.tape.push(shape, v, Op::SplineBasis { x: self.id, deriv }, rg)
    }

    // Composites.

    pub fn std_eps(self, eps: f64) -> Var<'t> {
        let mean = self.mean();
        let centered = self.sub(mean).expect("scalar broadcasts");
        centered.square().mean().sqrt_eps(eps)
    }

    pub fn l1_norm(self) -> Var<'t> {
        self.abs().sum()
    }

    pub fn l2_norm(self) -> Var<'t> {
        self.square().sum().sqrt_eps(0.0)
    }
}
