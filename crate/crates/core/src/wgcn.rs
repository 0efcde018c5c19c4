//! Weather-aware graph reasoning over a regular grid of feature nodes.
//!
//! Adjacency is the product of a feature-similarity softmax, a Gaussian
//! distance mask, a fog-dependent gain and an outer product of per-node
//! visibilities. It enters multi-head attention as an additive log bias.

use rand::Rng;

use crate::autodiff::kernels::bin_bounds;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{self, ParamId, ParamKind, ParamStore};

/// Guard for the visibility contrast ratio.
pub const CONTRAST_EPS: f64 = 1e-6;
/// Lower bound applied to the distance bandwidth during the forward pass.
pub const SIGMA_FLOOR: f64 = 1e-3;
const NORM_EPS: f64 = 1e-12;

/// Pools a `[D, H, W]` feature map into a `gh × gw` grid of nodes, returning
/// `[N, D]` features in row-major node order.
pub fn grid_nodes<'t>(fmap: Var<'t>, gh: usize, gw: usize) -> Result<Var<'t>> {
    let s = fmap.shape();
    if s.len() != 3 {
        return Err(Error::invalid("grid_nodes", format!("expected [D, H, W], got {s:?}")));
    }
    if s[1] < gh || s[2] < gw || gh == 0 || gw == 0 {
        return Err(Error::invalid("grid_nodes", format!("{}x{} map is smaller than the {gh}x{gw} grid", s[1], s[2])));
    }
    fmap.adaptive_avg_pool(gh, gw)?.reshape(&[s[0], gh * gw])?.t()
}

/// Pixel-space centers of the `gh × gw` patches of an `h × w` image.
pub fn node_centers(h: usize, w: usize, gh: usize, gw: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        let (r0, r1) = bin_bounds(h, gh, i);
        for j in 0..gw {
            let (c0, c1) = bin_bounds(w, gw, j);
            out.push(((r0 + r1 - 1) as f64 / 2.0, (c0 + c1 - 1) as f64 / 2.0));
        }
    }
    out
}

/// Per-node `[contrast, edge]` statistics of the luma of a `[3, H, W]` image.
/// Contrast is `std / (mean + ε)` over the patch; edge is the mean magnitude
/// of forward differences taken inside the patch.
pub fn patch_stats(img: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::invalid("visibility_map", format!("expected a [3, H, W] image, got {s:?}"))),
    };
    if h < gh || w < gw {
        return Err(Error::invalid("visibility_map", "image smaller than the node grid"));
    }
    let d = img.data();
    let luma = |r: usize, c: usize| {
        let k = r * w + c;
        0.299 * d[k] + 0.587 * d[h * w + k] + 0.114 * d[2 * h * w + k]
    };
    let mut out = Vec::with_capacity(gh * gw * 2);
    for i in 0..gh {
        let (r0, r1) = bin_bounds(h, gh, i);
        for j in 0..gw {
            let (c0, c1) = bin_bounds(w, gw, j);
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let v0 = luma(r0, c0);
            let mut shifted = 0.0;
            let mut edge = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    let v = luma(r, c);
                    shifted += v - v0;
                    let gx = if c + 1 < c1 { luma(r, c + 1) - v } else { 0.0 };
                    let gy = if r + 1 < r1 { luma(r + 1, c) - v } else { 0.0 };
                    edge += (gx * gx + gy * gy).sqrt();
                }
            }
            let m_shift = shifted / n;
            let mean = v0 + m_shift;
            let var = (r0..r1)
                .flat_map(|r| (c0..c1).map(move |c| (r, c)))
                .map(|(r, c)| (luma(r, c) - v0 - m_shift).powi(2))
                .sum::<f64>()
                / n;
            out.push(var.sqrt() / (mean + CONTRAST_EPS));
            out.push(edge / n);
        }
    }
    Tensor::new(&[gh * gw, 2], out)
}

/// `row-softmax(f fᵀ / τ)` for embedded node features `f: [N, k]`.
pub fn similarity_adjacency<'t>(f: Var<'t>, tau: f64) -> Result<Var<'t>> {
    check_tau(tau)?;
    f.matmul(f.t()?)?.mul_scalar(1.0 / tau).softmax(1)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::invalid("similarity_adjacency", format!("tau {tau} must be positive")));
    }
    Ok(())
}

/// Squared pixel distances between centers, `[N, N]`.
pub fn squared_distances(centers: &[(f64, f64)]) -> Tensor {
    let n = centers.len();
    let mut d = vec![0.0; n * n];
    for (i, a) in centers.iter().enumerate() {
        for (j, b) in centers.iter().enumerate() {
            d[i * n + j] = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        }
    }
    Tensor::new(&[n, n], d).expect("at least one center")
}

/// `-d² / (2σ²)`, the log of the distance mask, with σ clamped below.
fn log_distance<'t>(d2: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    let s2 = sigma.clamp(SIGMA_FLOOR, f64::INFINITY).square().mul_scalar(2.0);
    d2.neg().div(s2)
}

/// `exp(-d² / (2σ²))`.
pub fn distance_mask<'t>(d2: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    Ok(log_distance(d2, sigma)?.exp())
}

/// `A_sim ⊙ M_dist · γ`.
pub fn fuse_adjacency<'t>(a_sim: Var<'t>, m_dist: Var<'t>, gamma: Var<'t>) -> Result<Var<'t>> {
    a_sim.mul(m_dist)?.mul(gamma)
}

/// `A_hat ⊙ (m mᵀ)` for visibilities `m: [N, 1]`.
pub fn weather_modulate<'t>(a_hat: Var<'t>, m: Var<'t>) -> Result<Var<'t>> {
    a_hat.mul(m.matmul(m.t()?)?)
}

fn log_softmax_rows<'t>(s: Var<'t>) -> Result<Var<'t>> {
    let n = s.shape()[0];
    let z = s.sub(s.max_axis(1)?.reshape(&[n, 1])?)?;
    let lse = z.exp().sum_axis(1)?.log()?.reshape(&[n, 1])?;
    z.sub(lse)
}

/// Multi-head attention projections and head mixing.
#[derive(Clone, Debug)]
pub struct Attention {
    heads: usize,
    d_k: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    head_logits: ParamId,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid("multihead_gcn", format!("{heads} heads do not divide feature dim {dim}")));
        }
        let d_k = dim / heads;
        Ok(Self {
            heads,
            d_k,
            wq: store.add(format!("{name}.wq"), ParamKind::Weight, params::glorot(rng, &[dim, dim], dim, d_k)),
            wk: store.add(format!("{name}.wk"), ParamKind::Weight, params::glorot(rng, &[dim, dim], dim, d_k)),
            wv: store.add(format!("{name}.wv"), ParamKind::Weight, params::glorot(rng, &[dim, dim], dim, d_k)),
            wo: store.add(format!("{name}.wo"), ParamKind::Weight, params::glorot(rng, &[heads, d_k, dim], d_k, dim)),
            head_logits: store.add(format!("{name}.head_logits"), ParamKind::Other, Tensor::zeros(&[heads])),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> [ParamId; 5] {
        [self.wq, self.wk, self.wv, self.wo, self.head_logits]
    }

    /// `Σ_h α_h · softmax(Q_h K_hᵀ / √d_k + log_bias) V_h W_O^h`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, log_bias: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.heads * self.d_k {
            return Err(Error::shape("multihead_gcn", &s, &[0, self.heads * self.d_k]));
        }
        let n = s[0];
        if log_bias.shape() != [n, n] {
            return Err(Error::shape("multihead_gcn", &log_bias.shape(), &[n, n]));
        }
        let q = x.matmul(tape.param(store, self.wq))?;
        let k = x.matmul(tape.param(store, self.wk))?;
        let v = x.matmul(tape.param(store, self.wv))?;
        let wo = tape.param(store, self.wo);
        let alpha = tape.param(store, self.head_logits).softmax(0)?;
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut acc: Option<Var<'t>> = None;
        for h in 0..self.heads {
            let (o, d) = (h * self.d_k, self.d_k);
            let qh = q.narrow(1, o, d)?;
            let kh = k.narrow(1, o, d)?;
            let vh = v.narrow(1, o, d)?;
            let p = qh.matmul(kh.t()?)?.mul_scalar(scale).add(log_bias)?.softmax(1)?;
            let woh = wo.narrow(0, h, 1)?.reshape(&[d, s[1]])?;
            let yh = p.matmul(vh)?.matmul(woh)?.mul(alpha.narrow(0, h, 1)?)?;
            acc = Some(match acc {
                Some(a) => a.add(yh)?,
                None => yh,
            });
        }
        Ok(acc.expect("at least one head"))
    }
}

/// Attention over an explicit adjacency: zero entries are excluded and
/// positive entries add `log A(i, j)` to the logits.
pub fn multihead_gcn<'t>(tape: &'t Tape, store: &ParamStore, att: &Attention, x: Var<'t>, a_weather: Var<'t>) -> Result<Var<'t>> {
    att.forward(tape, store, x, a_weather.log_masked())
}

/// `E_strength = ‖∇X‖` from forward differences on the node grid, for
/// `x: [D, gh, gw]`.
pub fn edge_strength<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let g = x.diff_x()?.square().add(x.diff_y()?.square())?;
    Ok(g.sum_axis(0)?.sqrt_eps(NORM_EPS))
}

/// `E_structure`: mean over existing 4-neighbors of `‖X(x) − X(y)‖`.
pub fn edge_structure<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (gh, gw) = (s[1], s[2]);
    let tape = x.tape();
    let mut total = tape.constant(&Tensor::zeros(&[gh, gw]));
    let mut count = vec![0.0; gh * gw];
    if gw > 1 {
        let d = x.narrow(2, 1, gw - 1)?.sub(x.narrow(2, 0, gw - 1)?)?;
        let norm = d.square().sum_axis(0)?.sqrt_eps(NORM_EPS);
        let z = tape.constant(&Tensor::zeros(&[gh, 1]));
        total = total.add(Var::concat(&[norm, z], 1)?)?.add(Var::concat(&[z, norm], 1)?)?;
        for i in 0..gh {
            for j in 0..gw {
                count[i * gw + j] += (j + 1 < gw) as u8 as f64 + (j > 0) as u8 as f64;
            }
        }
    }
    if gh > 1 {
        let d = x.narrow(1, 1, gh - 1)?.sub(x.narrow(1, 0, gh - 1)?)?;
        let norm = d.square().sum_axis(0)?.sqrt_eps(NORM_EPS);
        let z = tape.constant(&Tensor::zeros(&[1, gw]));
        total = total.add(Var::concat(&[norm, z], 0)?)?.add(Var::concat(&[z, norm], 0)?)?;
        for i in 0..gh {
            for j in 0..gw {
                count[i * gw + j] += (i + 1 < gh) as u8 as f64 + (i > 0) as u8 as f64;
            }
        }
    }
    if gh * gw == 1 {
        return Ok(total);
    }
    total.div(tape.constant(&Tensor::new(&[gh, gw], count)?))
}

/// How the graph connectivity is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyMode {
    /// Similarity, distance, fog gain and visibility.
    Dynamic,
    /// Fixed 4-neighbor plus self-loop grid adjacency.
    FixedGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WgcnConfig {
    pub dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub tau: f64,
    pub beta_e: f64,
    pub grid: (usize, usize),
    pub mode: AdjacencyMode,
}

impl Default for WgcnConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            embed_dim: 16,
            heads: 4,
            tau: 1.0,
            beta_e: 0.5,
            grid: (16, 16),
            mode: AdjacencyMode::Dynamic,
        }
    }
}

/// Diagnostics produced alongside the enhanced node features.
pub struct GraphOutput<'t> {
    pub y: Var<'t>,
    pub y_gcn: Var<'t>,
    pub a_sim: Option<Var<'t>>,
    pub m_dist: Option<Var<'t>>,
    pub a_weather: Option<Var<'t>>,
    pub m_weather: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Wgcn {
    cfg: WgcnConfig,
    mlp: [Linear; 3],
    sigma: ParamId,
    gamma: [ParamId; 2],
    weather: Linear,
    attention: Attention,
    edge_w: ParamId,
    edge_b: ParamId,
}

impl Wgcn {
    /// `sigma_init` is the node pitch in pixels.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &WgcnConfig, sigma_init: f64) -> Result<Self> {
        check_tau(cfg.tau)?;
        let (d, e) = (cfg.dim, cfg.embed_dim);
        let mlp = [
            Linear::new(store, rng, &format!("{name}.f1"), d, e, true),
            Linear::new(store, rng, &format!("{name}.f2"), e, e, true),
            Linear::new(store, rng, &format!("{name}.f3"), e, e, true),
        ];
        let sigma = store.add(format!("{name}.sigma"), ParamKind::Other, Tensor::from_vec(vec![sigma_init]));
        let g0 = store.add(format!("{name}.gamma0"), ParamKind::Other, Tensor::from_vec(vec![(std::f64::consts::E - 1.0).ln()]));
        let g1 = store.add(format!("{name}.gamma1"), ParamKind::Other, Tensor::from_vec(vec![0.0]));
        let weather = Linear::new(store, rng, &format!("{name}.weather"), d + 2, 1, true);
        let attention = Attention::new(store, rng, &format!("{name}.att"), d, cfg.heads)?;
        let edge_w = store.add(format!("{name}.edge_w"), ParamKind::Weight, params::glorot(rng, &[2, 1], 2, 1));
        let edge_b = store.add(format!("{name}.edge_b"), ParamKind::Bias, Tensor::zeros(&[1]));
        Ok(Self {
            cfg: cfg.clone(),
            mlp,
            sigma,
            gamma: [g0, g1],
            weather,
            attention,
            edge_w,
            edge_b,
        })
    }

    pub fn config(&self) -> &WgcnConfig {
        &self.cfg
    }

    pub fn attention(&self) -> &Attention {
        &self.attention
    }

    pub fn weather_head(&self) -> &Linear {
        &self.weather
    }

    pub fn edge_params(&self) -> (ParamId, ParamId) {
        (self.edge_w, self.edge_b)
    }

    pub fn sigma(&self) -> ParamId {
        self.sigma
    }

    pub fn gamma_params(&self) -> [ParamId; 2] {
        self.gamma
    }

    /// Row-wise embedding `f(X)` of the similarity branch.
    pub fn embed<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.mlp[0].forward(tape, store, x)?.relu();
        let h = self.mlp[1].forward(tape, store, h)?.relu();
        self.mlp[2].forward(tape, store, h)
    }

    /// `γ = softplus(g0 + g1·β)`.
    pub fn gamma<'t>(&self, tape: &'t Tape, store: &ParamStore, beta: Var<'t>) -> Result<Var<'t>> {
        let g0 = tape.param(store, self.gamma[0]);
        let g1 = tape.param(store, self.gamma[1]);
        Ok(g0.add(g1.mul(beta.reshape(&[1])?)?)?.softplus())
    }

    /// `sigmoid(W [stats, X] + b)`, shape `[N, 1]`.
    pub fn visibility<'t>(&self, tape: &'t Tape, store: &ParamStore, stats: &Tensor, x: Var<'t>) -> Result<Var<'t>> {
        let both = Var::concat(&[tape.constant(stats), x], 1)?;
        Ok(self.weather.forward(tape, store, both)?.sigmoid())
    }

    /// Dynamic adjacency and its log, computed as a sum of logs so distant
    /// pairs never underflow to an excluded edge.
    #[allow(clippy::type_complexity)]
    fn dynamic_adjacency<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        centers: &[(f64, f64)],
        stats: &Tensor,
        beta: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>, Var<'t>, Var<'t>)> {
        let n = centers.len();
        let f = self.embed(tape, store, x)?;
        let logits = f.matmul(f.t()?)?.mul_scalar(1.0 / self.cfg.tau);
        let log_sim = log_softmax_rows(logits)?;
        let a_sim = log_sim.exp();
        let d2 = tape.constant(&squared_distances(centers));
        let log_dist = log_distance(d2, tape.param(store, self.sigma))?;
        let m_dist = log_dist.exp();
        let gamma = self.gamma(tape, store, beta)?;
        let m = self.visibility(tape, store, stats, x)?;
        let a_weather = weather_modulate(fuse_adjacency(a_sim, m_dist, gamma)?, m)?;
        let log_m = m.log_eps(0.0);
        let log_bias = log_sim
            .add(log_dist)?
            .add(gamma.log_eps(0.0))?
            .add(log_m)?
            .add(log_m.reshape(&[1, n])?)?;
        Ok((log_bias, a_sim, m_dist, a_weather, m))
    }

    /// Full graph stage on `x: [N, D]` nodes laid out on `cfg.grid`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        centers: &[(f64, f64)],
        stats: &Tensor,
        beta: Var<'t>,
    ) -> Result<GraphOutput<'t>> {
        let (gh, gw) = self.cfg.grid;
        let n = gh * gw;
        if x.shape() != [n, self.cfg.dim] || centers.len() != n || stats.shape() != [n, 2] {
            return Err(Error::shape("wgcn", &x.shape(), &[n, self.cfg.dim]));
        }
        let out = match self.cfg.mode {
            AdjacencyMode::Dynamic => {
                let (log_bias, a_sim, m_dist, a_weather, m) = self.dynamic_adjacency(tape, store, x, centers, stats, beta)?;
                let y_gcn = self.attention.forward(tape, store, x, log_bias)?;
                GraphOutput {
                    y: y_gcn,
                    y_gcn,
                    a_sim: Some(a_sim),
                    m_dist: Some(m_dist),
                    a_weather: Some(a_weather),
                    m_weather: Some(m),
                }
            }
            AdjacencyMode::FixedGrid => {
                let adj = tape.constant(&grid_adjacency(gh, gw));
                let y_gcn = multihead_gcn(tape, store, &self.attention, x, adj)?;
                GraphOutput {
                    y: y_gcn,
                    y_gcn,
                    a_sim: None,
                    m_dist: None,
                    a_weather: Some(adj),
                    m_weather: None,
                }
            }
        };
        let y = self.edge_enhance(tape, store, out.y_gcn, x)?;
        Ok(GraphOutput { y, ..out })
    }

    /// `Y ⊙ (1 + β_e · sigmoid(W_E [E_strength, E_structure] + b_E))`.
    pub fn edge_enhance<'t>(&self, tape: &'t Tape, store: &ParamStore, y: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if self.cfg.beta_e == 0.0 {
            return Ok(y);
        }
        let (gh, gw) = self.cfg.grid;
        let (n, d) = (gh * gw, self.cfg.dim);
        let grid = x.t()?.reshape(&[d, gh, gw])?;
        let es = edge_strength(grid)?.reshape(&[n, 1])?;
        let est = edge_structure(grid)?.reshape(&[n, 1])?;
        let e = Var::concat(&[es, est], 1)?;
        let imp = e
            .matmul(tape.param(store, self.edge_w))?
            .add(tape.param(store, self.edge_b))?
            .sigmoid();
        y.mul(imp.mul_scalar(self.cfg.beta_e).add_scalar(1.0))
    }
}

/// 4-neighbor plus self adjacency of a `gh × gw` grid, row-major nodes.
pub fn grid_adjacency(gh: usize, gw: usize) -> Tensor {
    let n = gh * gw;
    let mut a = vec![0.0; n * n];
    for i in 0..gh {
        for j in 0..gw {
            let u = i * gw + j;
            a[u * n + u] = 1.0;
            if j + 1 < gw {
                a[u * n + u + 1] = 1.0;
                a[(u + 1) * n + u] = 1.0;
            }
            if i + 1 < gh {
                a[u * n + u + gw] = 1.0;
                a[(u + gw) * n + u] = 1.0;
            }
        }
    }
    Tensor::new(&[n, n], a).expect("square adjacency")
}
