//! Raw numeric kernels behind the tape operations. All buffers are row-major.

/// Numpy-style broadcast of two shapes (trailing dimensions aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` laid against `out`, zero on broadcast axes.
pub(crate) fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        let oi = i + n - input.len();
        strides[oi] = if input[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= input[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` over every element of `out`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to `input` shape.
pub(crate) fn reduce_to(g: &[f64], out: &[usize], input: &[usize]) -> Vec<f64> {
    let n: usize = input.iter().product();
    if n == g.len() {
        return g.to_vec();
    }
    let strides = broadcast_strides(input, out);
    let zero = vec![0; out.len()];
    let mut r = vec![0.0; n];
    for_each_broadcast(out, &strides, &zero, |o, ia, _| r[ia] += g[o]);
    r
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Unfolds `[C,H,W]` into `[C·kh·kw, oh·ow]` columns with zero padding.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let cols_n = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * cols_n];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..g.oh {
                    let ii = oi + ki;
                    if ii < g.pad || ii - g.pad >= g.h {
                        continue;
                    }
                    let src_row = &x[(c * g.h + ii - g.pad) * g.w..(c * g.h + ii - g.pad + 1) * g.w];
                    let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = oj + kj;
                        if jj >= g.pad && jj - g.pad < g.w {
                            *d = src_row[jj - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let cols_n = g.oh * g.ow;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..g.oh {
                    let ii = oi + ki;
                    if ii < g.pad || ii - g.pad >= g.h {
                        continue;
                    }
                    let base = (c * g.h + ii - g.pad) * g.w;
                    for oj in 0..g.ow {
                        let jj = oj + kj;
                        if jj >= g.pad && jj - g.pad < g.w {
                            x[base + jj - g.pad] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Partition boundaries for splitting `n` cells into `bins` contiguous groups.
pub(crate) fn bin_bounds(n: usize, bins: usize, i: usize) -> (usize, usize) {
    (i * n / bins, (i + 1) * n / bins)
}

/// Adaptive average pooling over the last two axes, planes = leading extents.
pub(crate) fn adaptive_avg_pool(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for bi in 0..oh {
            let (r0, r1) = bin_bounds(h, oh, bi);
            for bj in 0..ow {
                let (c0, c1) = bin_bounds(w, ow, bj);
                let mut s = 0.0;
                for r in r0..r1 {
                    s += src[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                out[(p * oh + bi) * ow + bj] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for bi in 0..oh {
            let (r0, r1) = bin_bounds(h, oh, bi);
            for bj in 0..ow {
                let (c0, c1) = bin_bounds(w, ow, bj);
                let share = g[(p * oh + bi) * ow + bj] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for v in &mut dx[p * h * w + r * w + c0..p * h * w + r * w + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour source index for output position `i` of `out` cells over `n` inputs.
#[inline]
pub(crate) fn nearest_src(i: usize, n: usize, out: usize) -> usize {
    (i * n / out).min(n - 1)
}

/// Edge-truncated sliding-window max (stride 1, same size); returns values and argmax offsets.
pub(crate) fn window_max(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let r = window / 2;
    let mut out = vec![0.0; planes * h * w];
    let mut arg = vec![0usize; planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            let (r0, r1) = (i.saturating_sub(r), (i + r + 1).min(h));
            for j in 0..w {
                let (c0, c1) = (j.saturating_sub(r), (j + r + 1).min(w));
                let mut best = f64::NEG_INFINITY;
                let mut bi = base + r0 * w + c0;
                for rr in r0..r1 {
                    for cc in c0..c1 {
                        let v = x[base + rr * w + cc];
                        if v > best {
                            best = v;
                            bi = base + rr * w + cc;
                        }
                    }
                }
                out[base + i * w + j] = best;
                arg[base + i * w + j] = bi;
            }
        }
    }
    (out, arg)
}

/// Edge-truncated box sum of radius `r` via an integral image; also returns window counts.
pub(crate) fn box_sum(x: &[f64], planes: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += src[i * w + j];
                integral[(i + 1) * (w + 1) + j + 1] = integral[i * (w + 1) + j + 1] + row;
            }
        }
        for i in 0..h {
            let (r0, r1) = (i.saturating_sub(r), (i + r + 1).min(h));
            for j in 0..w {
                let (c0, c1) = (j.saturating_sub(r), (j + r + 1).min(w));
                out[p * h * w + i * w + j] = integral[r1 * (w + 1) + c1]
                    - integral[r0 * (w + 1) + c1]
                    - integral[r1 * (w + 1) + c0]
                    + integral[r0 * (w + 1) + c0];
            }
        }
    }
    out
}

pub(crate) fn box_counts(h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut cnt = vec![0.0; h * w];
    for i in 0..h {
        let rows = (i + r + 1).min(h) - i.saturating_sub(r);
        for j in 0..w {
            let cols = (j + r + 1).min(w) - j.saturating_sub(r);
            cnt[i * w + j] = (rows * cols) as f64;
        }
    }
    cnt
}

/// Mean over every fully-contained `kh × kw` window (valid sliding window).
pub(crate) fn window_mean_valid(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let inv = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        // Column sums over kh rows, then slide horizontally.
        for i in 0..oh {
            let mut colsum = vec![0.0; w];
            for rr in i..i + kh {
                for (c, v) in colsum.iter_mut().zip(&src[rr * w..(rr + 1) * w]) {
                    *c += v;
                }
            }
            for j in 0..ow {
                out[(p * oh + i) * ow + j] = colsum[j..j + kw].iter().sum::<f64>() * inv;
            }
        }
    }
    out
}

pub(crate) fn window_mean_valid_backward(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let inv = 1.0 / (kh * kw) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let share = g[(p * oh + i) * ow + j] * inv;
                for rr in i..i + kh {
                    for v in &mut dx[p * h * w + rr * w + j..p * h * w + rr * w + j + kw] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}
