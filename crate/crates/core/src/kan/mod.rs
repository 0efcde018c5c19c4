//! Kolmogorov-Arnold layers with learnable B-spline edge functions.
//!
//! Every edge `p -> q` carries `φ(x) = Σ_i c_i B_i(x) + w·silu(x) + b`. A
//! layer evaluates all edges at once by expanding inputs into their basis and
//! contracting against the coefficient tensor, so a layer is two matmuls.

mod bspline;

pub use bspline::SplineGrid;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamKind, ParamStore};

/// One univariate edge function, held as plain values.
#[derive(Clone, Debug)]
pub struct SplineEdge {
    pub grid: SplineGrid,
    pub c: Vec<f64>,
    pub w: f64,
    pub b: f64,
}

impl SplineEdge {
    pub fn new(grid: SplineGrid, c: Vec<f64>, w: f64, b: f64) -> Result<Self> {
        if c.len() != grid.n_basis() {
            return Err(Error::shape("spline_edge", &[c.len()], &[grid.n_basis()]));
        }
        Ok(Self { grid, c, w, b })
    }

    /// Places the edge's parameters on `tape` as differentiable leaves.
    pub fn vars<'t>(&self, tape: &'t Tape) -> EdgeVars<'t> {
        EdgeVars {
            c: tape.leaf(&Tensor::from_vec(self.c.clone()).with_requires_grad(true)),
            w: tape.leaf(&Tensor::scalar(self.w).with_requires_grad(true)),
            b: tape.leaf(&Tensor::scalar(self.b).with_requires_grad(true)),
        }
    }
}

#[derive(Clone, Copy)]
pub struct EdgeVars<'t> {
    pub c: Var<'t>,
    pub w: Var<'t>,
    pub b: Var<'t>,
}

/// Elementwise `φ(x)` for a single edge; any input shape.
pub fn edge_activation<'t>(x: Var<'t>, grid: &SplineGrid, e: EdgeVars<'t>) -> Result<Var<'t>> {
    let nb = grid.n_basis();
    let shape = x.shape();
    let basis = x.spline_basis(grid).reshape(&[x.len(), nb])?;
    let spline = basis.matmul(e.c.reshape(&[nb, 1])?)?.reshape(&shape)?;
    spline.add(x.silu().mul(e.w)?)?.add(e.b)
}

/// `Σ_s softmax(logits)_s · φ_s(x / scale_s)`.
pub fn multiscale_activation<'t>(
    x: Var<'t>,
    grid: &SplineGrid,
    branches: &[(f64, EdgeVars<'t>)],
    logits: Var<'t>,
) -> Result<Var<'t>> {
    if branches.is_empty() || logits.len() != branches.len() {
        return Err(Error::shape("multiscale_activation", &[branches.len()], &logits.shape()));
    }
    let alpha = logits.reshape(&[branches.len()])?.softmax(0)?;
    let mut acc: Option<Var<'t>> = None;
    for (s, &(scale, e)) in branches.iter().enumerate() {
        if !(scale > 0.0) {
            return Err(Error::invalid("multiscale_activation", format!("scale {scale} must be positive")));
        }
        let a = alpha.narrow(0, s, 1)?;
        let term = edge_activation(x.mul_scalar(1.0 / scale), grid, e)?.mul(a)?;
        acc = Some(match acc {
            Some(v) => v.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Shape of the spline used by every edge of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_coeffs: usize,
    pub degree: usize,
}

impl Default for SplineSpec {
    fn default() -> Self {
        Self {
            lo: -3.0,
            hi: 3.0,
            n_coeffs: 9,
            degree: 3,
        }
    }
}

impl SplineSpec {
    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::uniform(self.lo, self.hi, self.n_coeffs, self.degree)
    }
}

#[derive(Clone, Debug)]
struct Branch {
    scale: f64,
    coef: ParamId,
    w: ParamId,
    b: ParamId,
}

/// Dense `in_dim -> out_dim` KAN layer; with more than one scale every edge
/// becomes a softmax-weighted mixture of rescaled branches.
#[derive(Clone, Debug)]
pub struct KanLayer {
    in_dim: usize,
    out_dim: usize,
    grid: SplineGrid,
    branches: Vec<Branch>,
    alpha: Option<ParamId>,
}

impl KanLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        spec: &SplineSpec,
        scales: &[f64],
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("kan_layer", "dimensions must be positive"));
        }
        if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("kan_layer", format!("bad scales {scales:?}")));
        }
        let grid = spec.grid()?;
        let nb = grid.n_basis();
        let w_bound = 1.0 / (in_dim as f64).sqrt();
        let branches = scales
            .iter()
            .enumerate()
            .map(|(s, &scale)| Branch {
                scale,
                coef: store.add(format!("{name}.s{s}.coef"), ParamKind::Spline, params::uniform(rng, &[out_dim, in_dim, nb], 0.1)),
                w: store.add(format!("{name}.s{s}.w"), ParamKind::Weight, params::uniform(rng, &[out_dim, in_dim], w_bound)),
                b: store.add(format!("{name}.s{s}.b"), ParamKind::Bias, Tensor::zeros(&[out_dim, in_dim])),
            })
            .collect();
        let alpha = (scales.len() > 1)
            .then(|| store.add(format!("{name}.alpha"), ParamKind::Other, Tensor::zeros(&[scales.len(), out_dim, in_dim])));
        Ok(Self {
            in_dim,
            out_dim,
            grid,
            branches,
            alpha,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn scales(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.scale).collect()
    }

    /// `(coef, w, b)` parameter ids of each branch, and the mixing logits.
    pub fn param_ids(&self) -> (Vec<(ParamId, ParamId, ParamId)>, Option<ParamId>) {
        (self.branches.iter().map(|b| (b.coef, b.w, b.b)).collect(), self.alpha)
    }

    /// `x: [n, in_dim] -> [n, out_dim]`, output `j = Σ_p φ_{j,p}(x_p)`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape("kan_forward", &shape, &[0, self.in_dim]));
        }
        let (n, nb) = (shape[0], self.grid.n_basis());
        let (o, i) = (self.out_dim, self.in_dim);
        let alpha = match self.alpha {
            Some(id) => Some(tape.param(store, id).softmax(0)?),
            None => None,
        };
        let mut acc: Option<Var<'t>> = None;
        for (s, br) in self.branches.iter().enumerate() {
            let mut c = tape.param(store, br.coef);
            let mut w = tape.param(store, br.w);
            let mut b = tape.param(store, br.b);
            if let Some(alpha) = alpha {
                let a = alpha.narrow(0, s, 1)?.reshape(&[o, i])?;
                c = c.mul(a.reshape(&[o, i, 1])?)?;
                w = w.mul(a)?;
                b = b.mul(a)?;
            }
            let xs = if br.scale == 1.0 { x } else { x.mul_scalar(1.0 / br.scale) };
            let basis = xs.spline_basis(&self.grid).reshape(&[n, i * nb])?;
            let spline = basis.matmul(c.reshape(&[o, i * nb])?.t()?)?;
            let resid = xs.silu().matmul(w.t()?)?;
            let y = spline.add(resid)?.add(b.sum_axis(1)?)?;
            acc = Some(match acc {
                Some(v) => v.add(y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one branch"))
    }
}

/// `Y_l + sigmoid(W_gate·[Y_l, Y_prev] + b_gate) ⊙ (W_skip·Y_prev)`.
#[derive(Clone, Debug)]
pub struct GatedSkip {
    gate_w: ParamId,
    gate_b: ParamId,
    skip_w: ParamId,
}

impl GatedSkip {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, prev_dim: usize) -> Self {
        Self {
            gate_w: store.add(format!("{name}.gate_w"), ParamKind::Weight, params::glorot(rng, &[dim, dim + prev_dim], dim + prev_dim, dim)),
            gate_b: store.add(format!("{name}.gate_b"), ParamKind::Bias, Tensor::zeros(&[dim])),
            skip_w: store.add(format!("{name}.skip_w"), ParamKind::Weight, params::glorot(rng, &[dim, prev_dim], prev_dim, dim)),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.gate_w, self.gate_b, self.skip_w]
    }

    /// Returns `(Y_final, gate)`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, y: Var<'t>, prev: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let cat = Var::concat(&[y, prev], 1)?;
        let gate = cat
            .matmul(tape.param(store, self.gate_w).t()?)?
            .add(tape.param(store, self.gate_b))?
            .sigmoid();
        let skip = prev.matmul(tape.param(store, self.skip_w).t()?)?;
        Ok((y.add(gate.mul(skip)?)?, gate))
    }
}

/// Bottom, middle and top KAN layers, each followed by a gated skip from the
/// previous level's output (the stack input for the bottom level).
#[derive(Clone, Debug)]
pub struct MsaKanStack {
    layers: Vec<KanLayer>,
    skips: Vec<GatedSkip>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanStackConfig {
    /// `[input, bottom, middle, top]` widths.
    pub widths: [usize; 4],
    pub spline: SplineSpec,
    /// Branch scales per level; a single entry disables multi-scale.
    pub scales: [Vec<f64>; 3],
}

impl Default for KanStackConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32, 32],
            spline: SplineSpec::default(),
            scales: [vec![1.0], vec![1.0, 2.0, 4.0], vec![1.0]],
        }
    }
}

impl MsaKanStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &KanStackConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(3);
        let mut skips = Vec::with_capacity(3);
        for l in 0..3 {
            let (i, o) = (cfg.widths[l], cfg.widths[l + 1]);
            layers.push(KanLayer::new(store, rng, &format!("{name}.l{l}"), i, o, &cfg.spline, &cfg.scales[l])?);
            skips.push(GatedSkip::new(store, rng, &format!("{name}.g{l}"), o, i));
        }
        Ok(Self { layers, skips })
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn skips(&self) -> &[GatedSkip] {
        &self.skips
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].out_dim()
    }

    /// Gated outputs of the three levels.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<[Var<'t>; 3]> {
        let mut prev = x;
        let mut out = Vec::with_capacity(3);
        for (layer, skip) in self.layers.iter().zip(&self.skips) {
            let y = layer.forward(tape, store, prev)?;
            let (y, _) = skip.forward(tape, store, y, prev)?;
            out.push(y);
            prev = y;
        }
        Ok([out[0], out[1], out[2]])
    }
}
