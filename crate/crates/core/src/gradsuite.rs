//! The finite-difference gradient suite: every differentiable primitive, the
//! module-level compositions and one end-to-end training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atmos::{self, Refiner};
use crate::autodiff::{grad_check, grad_check_params, GradCheckReport, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::kan::{self, KanLayer, SplineGrid, SplineSpec};
use crate::losses::{self, LossWeights, PhysicsPrediction, PhysicsTruth};
use crate::model::Model;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::train::{sample_loss, EvalItem};
use crate::wgcn::{self, Wgcn, WgcnConfig};

pub const STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

type Check = Box<dyn Fn(f64) -> Result<GradCheckReport>>;

pub struct Case {
    pub name: String,
    check: Check,
}

impl Case {
    pub fn run(&self, tol: f64) -> Result<GradCheckReport> {
        (self.check)(tol)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn input<F>(name: &str, x: Tensor, f: F) -> Case
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>> + 'static,
{
    Case {
        name: name.to_string(),
        check: Box::new(move |tol| grad_check(&f, &x, STEP, tol)),
    }
}

fn params<F>(name: &str, store: ParamStore, f: F) -> Case
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>> + 'static,
{
    Case {
        name: name.to_string(),
        check: Box::new(move |tol| {
            let coords = strongest_coords(&store, &f)?;
            grad_check_params(&store, &coords, &f, STEP, tol)
        }),
    }
}

/// Per parameter tensor, the coordinate with the largest gradient magnitude.
fn strongest_coords<F>(store: &ParamStore, f: &F) -> Result<Vec<(ParamId, usize)>>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let grads = tape.backward(f(&tape, store)?)?;
    Ok(store
        .ids()
        .map(|id| {
            let k = grads.param(id).map_or(0, |g| {
                g.iter()
                    .enumerate()
                    .fold((0, -1.0), |(bk, bv), (k, v)| if v.abs() > bv { (k, v.abs()) } else { (bk, bv) })
                    .0
            });
            (id, k)
        })
        .collect())
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Weighted sum so every output coordinate carries a distinct upstream gradient.
pub fn weighted<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let n = y.len();
    let w = Tensor::new(&y.shape(), (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 13.0).collect())?;
    y.mul(y.tape().constant(&w)).map(Var::sum)
}

/// Moves biases off zero and fills all-zero weights so no unit sits on a
/// ReLU kink or behind a dead branch.
pub fn jitter_params(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let kind = store.kind(id);
        let t = store.tensor_mut(id);
        let all_zero = t.data().iter().all(|v| *v == 0.0);
        if kind == ParamKind::Bias || (kind == ParamKind::Weight && all_zero) {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    }
}

/// Elementwise, shape, reduction and spatial primitives.
pub fn primitive_cases() -> Vec<Case> {
    let x = random(&[3, 4], -2.0, 2.0, 3);
    let pos = random(&[3, 4], 0.5, 2.0, 4);
    let other = random(&[3, 4], -2.0, 2.0, 5);
    let row = random(&[4], -2.0, 2.0, 6);
    let den = random(&[3, 4], 0.5, 2.0, 7);
    let b = random(&[4, 5], -2.0, 2.0, 9);
    let img = random(&[2, 6, 8], -2.0, 2.0, 21);
    let w = random(&[3, 2, 3, 3], -1.0, 1.0, 22);
    let bias = random(&[3], -1.0, 1.0, 23);
    let grid = SplineGrid::uniform(-3.0, 3.0, 9, 3).expect("valid grid");

    let (r1, o1, o2, d1) = (row.clone(), other.clone(), other.clone(), den.clone());
    let (x1, b1) = (x.clone(), b.clone());
    let (w1, w2, bi1, bi2, img1, img2) = (w.clone(), w.clone(), bias.clone(), bias.clone(), img.clone(), img.clone());
    let x2 = x.clone();
    vec![
        input("add", x.clone(), move |t, x| weighted(x.add(t.constant(&r1))?)),
        input("sub", x.clone(), move |t, x| weighted(t.constant(&o1).sub(x)?)),
        input("mul", x.clone(), {
            let r = row.clone();
            move |t, x| weighted(x.mul(x)?.mul(t.constant(&r))?)
        }),
        input("div", x.clone(), move |t, x| weighted(x.div(t.constant(&d1))?)),
        input("div_eps", pos.clone(), move |t, x| weighted(t.constant(&o2).div_eps(x, 1e-8)?)),
        input("broadcast operand", row.clone(), move |t, r| weighted(t.constant(&x2).mul(r)?)),
        input("scalar ops", x.clone(), |_, x| weighted(x.mul_scalar(-1.7).add_scalar(0.4).neg())),
        input("exp", x.clone(), |_, x| weighted(x.exp())),
        input("log", pos.clone(), |_, x| weighted(x.log()?)),
        input("log_eps", pos.clone(), |_, x| weighted(x.log_eps(1e-8))),
        input("log_masked", pos.clone(), |_, x| weighted(x.log_masked())),
        input("sqrt", pos.clone(), |_, x| weighted(x.sqrt()?)),
        input("sqrt_eps", pos.clone(), |_, x| weighted(x.sqrt_eps(1e-12))),
        input("square", x.clone(), |_, x| weighted(x.square())),
        input("abs", x.clone(), |_, x| weighted(x.abs())),
        input("sigmoid", x.clone(), |_, x| weighted(x.sigmoid())),
        input("silu", x.clone(), |_, x| weighted(x.silu())),
        input("relu", x.clone(), |_, x| weighted(x.relu())),
        input("softplus", x.clone(), |_, x| weighted(x.softplus())),
        input("logit_eps", random(&[3, 4], 0.05, 0.95, 8), |_, x| weighted(x.logit_eps(1e-12))),
        input("clamp", x.clone(), |_, x| weighted(x.clamp(-1.0, 1.2))),
        input("softmax axis 0", x.clone(), |_, x| weighted(x.softmax(0)?)),
        input("softmax axis 1", x.clone(), |_, x| weighted(x.softmax(1)?)),
        input("transpose", x.clone(), |_, x| weighted(x.t()?)),
        input("reshape", x.clone(), |_, x| weighted(x.reshape(&[2, 6])?)),
        input("broadcast_to", row.clone(), |_, r| weighted(r.broadcast_to(&[2, 4])?)),
        input("concat", x.clone(), move |t, x| weighted(Var::concat(&[x, t.constant(&other), x], 1)?)),
        input("narrow", x.clone(), |_, x| weighted(x.narrow(1, 1, 2)?)),
        input("sum", x.clone(), |_, x| Ok(x.sum())),
        input("mean", x.clone(), |_, x| Ok(x.mean())),
        input("sum_axis", x.clone(), |_, x| weighted(x.sum_axis(0)?)),
        input("mean_axis", x.clone(), |_, x| weighted(x.mean_axis(1)?)),
        input("max_axis", x.clone(), |_, x| weighted(x.max_axis(1)?)),
        input("min_axis", x.clone(), |_, x| weighted(x.min_axis(0)?)),
        input("max_all", x.clone(), |_, x| Ok(x.max_all()?.mul_scalar(1.3))),
        input("std_eps", x.clone(), |_, x| Ok(x.std_eps(1e-8))),
        input("l1_norm", x.clone(), |_, x| Ok(x.l1_norm())),
        input("l2_norm", x.clone(), |_, x| Ok(x.l2_norm())),
        input("matmul lhs", x.clone(), move |t, x| weighted(x.matmul(t.constant(&b1))?)),
        input("matmul rhs", b, move |t, b| weighted(t.constant(&x1).matmul(b)?)),
        input("conv2d input", img.clone(), move |t, x| weighted(x.conv2d(t.constant(&w1), Some(t.constant(&bi1)), 1)?)),
        input("conv2d weight", w.clone(), move |t, w| weighted(t.constant(&img1).conv2d(w, Some(t.constant(&bi2)), 1)?)),
        input("conv2d bias", bias, move |t, b| weighted(t.constant(&img2).conv2d(t.constant(&w2), Some(b), 0)?)),
        input("avg_pool", img.clone(), |_, x| weighted(x.avg_pool(2)?)),
        input("adaptive_avg_pool", img.clone(), |_, x| weighted(x.adaptive_avg_pool(4, 3)?)),
        input("global_avg_pool", img.clone(), |_, x| weighted(x.global_avg_pool()?)),
        input("upsample_nearest", img.clone(), |_, x| weighted(x.upsample_nearest(9, 13)?)),
        input("window_max", img.clone(), |_, x| weighted(x.window_max(3)?)),
        input("window_min", img.clone(), |_, x| weighted(x.window_min(5)?)),
        input("box_mean", img.clone(), |_, x| weighted(x.box_mean(2)?)),
        input("window_mean_valid", img.clone(), |_, x| weighted(x.window_mean_valid(3, 4)?)),
        input("diff_x", img.clone(), |_, x| weighted(x.diff_x()?)),
        input("diff_y", img.clone(), |_, x| weighted(x.diff_y()?)),
        input("spline_basis", img, move |_, x| weighted(x.spline_basis(&grid))),
    ]
}

/// Module-level compositions: spline edges, KAN layers, the transmission
/// chain, graph adjacency and attention, and each loss.
pub fn module_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let grid = SplineGrid::uniform(-3.0, 3.0, 9, 3).expect("valid grid");

    let (g1, g2) = (grid.clone(), grid.clone());
    let coef = random(&[9], -1.0, 1.0, 30);
    out.push(input("kan edge activation", random(&[7], -2.9, 2.9, 31), move |t, x| {
        let e = kan::EdgeVars {
            c: t.constant(&coef),
            w: t.scalar(0.7),
            b: t.scalar(-0.3),
        };
        weighted(kan::edge_activation(x, &g1, e)?)
    }));
    let coefs: Vec<Tensor> = (0..3).map(|k| random(&[9], -1.0, 1.0, 32 + k)).collect();
    out.push(input("kan multi-scale activation", random(&[3], -1.0, 1.0, 35), move |t, logits| {
        let branches: Vec<(f64, kan::EdgeVars)> = [1.0, 2.0, 4.0]
            .iter()
            .zip(&coefs)
            .map(|(s, c)| {
                (
                    *s,
                    kan::EdgeVars {
                        c: t.constant(c),
                        w: t.scalar(0.5),
                        b: t.scalar(0.1),
                    },
                )
            })
            .collect();
        let x = t.constant(&random(&[5], -2.5, 2.5, 36));
        weighted(kan::multiscale_activation(x, &g2, &branches, logits)?)
    }));

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let layer = KanLayer::new(&mut store, &mut rng, "kan", 3, 4, &SplineSpec::default(), &[1.0, 2.0, 4.0]).expect("layer");
    let kx = random(&[5, 3], -2.0, 2.0, 41);
    out.push(params("kan layer parameters", store, move |t, s| weighted(layer.forward(t, s, t.constant(&kx))?)));

    let img = random(&[3, 8, 8], 0.05, 0.95, 50);
    let (i1, i2, i3, i4) = (img.clone(), img.clone(), img.clone(), img.clone());
    out.push(input("dark channel wrt image", img.clone(), |t, i| {
        weighted(atmos::dark_channel_transmission(i, t.constant(&Tensor::from_vec(vec![0.8, 0.85, 0.9])), 3, 0.95)?)
    }));
    out.push(input("dark channel wrt airlight", Tensor::from_vec(vec![0.8, 0.85, 0.9]), move |t, a| {
        weighted(atmos::dark_channel_transmission(t.constant(&i1), a, 3, 0.95)?)
    }));
    let tmap = random(&[8, 8], 0.2, 0.9, 51);
    let t2 = tmap.clone();
    out.push(input("guided filter wrt input", tmap.clone(), move |t, p| {
        weighted(atmos::guided_filter(atmos::luma(t.constant(&i2))?, p, 2, 1e-2)?)
    }));
    out.push(input("guided filter wrt guide", img.clone(), move |t, i| {
        weighted(atmos::guided_filter(atmos::luma(i)?, t.constant(&t2), 2, 1e-2)?)
    }));
    let t3 = tmap.clone();
    out.push(input("dehaze wrt image", img.clone(), move |t, i| {
        weighted(atmos::dehaze(i, t.constant(&Tensor::from_vec(vec![0.9, 0.9, 0.9])), t.constant(&t3), 0.1)?)
    }));
    let t4 = tmap.clone();
    out.push(input("dehaze wrt transmission", random(&[8, 8], 0.5, 0.9, 52), move |t, tr| {
        let i = t.constant(&i3.map(|v| 0.4 + 0.2 * v));
        weighted(atmos::dehaze(i, t.constant(&Tensor::from_vec(vec![0.9, 0.9, 0.9])), tr, 0.1)?.mul(t.constant(&t4.map(|v| v + 0.5)))?)
    }));
    let mut store = ParamStore::new();
    let refiner = Refiner::new(&mut store, &mut ChaCha8Rng::seed_from_u64(53), "refiner", 2);
    jitter_params(&mut store, 54);
    let (t5, t6) = (tmap.clone(), random(&[8, 8], 0.1, 0.95, 55));
    out.push(params("refiner with refinement loss", store, move |t, s| {
        let tr = refiner.forward(t, s, t.constant(&t5), t.constant(&i4))?;
        atmos::refine_loss(tr, t.constant(&t6), 0.1)
    }));

    let feats = random(&[6, 4], -1.0, 1.0, 60);
    out.push(input("similarity adjacency", feats.clone(), |_, f| weighted(wgcn::similarity_adjacency(f, 1.0)?)));
    let centers = wgcn::node_centers(12, 8, 3, 2);
    let d2 = wgcn::squared_distances(&centers);
    out.push(input("distance mask wrt sigma", Tensor::from_vec(vec![3.0]), move |t, s| {
        weighted(wgcn::distance_mask(t.constant(&d2), s)?)
    }));
    let a_hat = random(&[6, 6], 0.1, 1.0, 61);
    out.push(input("weather modulation wrt visibility", random(&[6, 1], 0.1, 0.9, 62), move |t, m| {
        weighted(wgcn::weather_modulate(t.constant(&a_hat), m)?)
    }));
    out.push(input("edge strength", random(&[4, 3, 2], -1.0, 1.0, 63), |_, x| weighted(wgcn::edge_strength(x)?)));
    out.push(input("edge structure", random(&[4, 3, 2], -1.0, 1.0, 64), |_, x| weighted(wgcn::edge_structure(x)?)));
    let cfg = WgcnConfig {
        dim: 4,
        embed_dim: 3,
        heads: 2,
        grid: (3, 2),
        ..WgcnConfig::default()
    };
    let mut store = ParamStore::new();
    let g = Wgcn::new(&mut store, &mut ChaCha8Rng::seed_from_u64(65), "g", &cfg, 4.0).expect("wgcn");
    jitter_params(&mut store, 66);
    let stats = random(&[6, 2], 0.0, 1.0, 67);
    out.push(params("weather-aware graph stage", store, move |t, s| {
        let o = g.forward(t, s, t.constant(&feats), &centers, &stats, t.scalar(1.2))?;
        weighted(o.y)
    }));

    let gt = random(&[9, 10], 0.0, 1.0, 70);
    out.push(input("density loss with ssim", random(&[9, 10], 0.05, 1.0, 71), move |t, d| losses::density_loss(d, t.constant(&gt), 0.1)));
    let tt = random(&[4, 4], 0.0, 1.0, 72);
    out.push(input("physics loss", random(&[20], 0.0, 1.0, 73), move |t, v| {
        let pred = PhysicsPrediction {
            t: v.narrow(0, 0, 16)?.reshape(&[4, 4])?,
            beta: v.narrow(0, 16, 1)?,
            a: v.narrow(0, 17, 3)?,
        };
        let truth = PhysicsTruth {
            t: Some(t.constant(&tt)),
            beta: Some(t.scalar(1.0)),
            a: Some(t.constant(&Tensor::from_vec(vec![0.7, 0.8, 0.9]))),
        };
        Ok(losses::physics_loss(t, pred, truth)?.value)
    }));
    let mut store = ParamStore::new();
    store.add("w", ParamKind::Weight, random(&[3, 4], -1.0, 1.0, 74));
    store.add("c", ParamKind::Spline, random(&[2, 3, 9], -1.0, 1.0, 75));
    out.push(params("regularization", store, |t, s| losses::regularization_loss(t, s, &LossWeights::default())));
    out
}

/// Small configuration for the end-to-end check on 16×16 inputs.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        dcp_window: 3,
        guided_radius: 2,
        refiner_width: 2,
        stem_channels: 4,
        stem_pool: 2,
        kan_widths: [4, 6, 6, 6],
        spline_coeffs: 6,
        grid_h: 4,
        grid_w: 4,
        heads: 2,
        embed_dim: 4,
        decoder_channels: 4,
        ..ModelConfig::default()
    }
}

/// Total training objective of the toy model on one 16×16 sample, checked
/// over the strongest coordinate of every parameter tensor.
pub fn end_to_end_case() -> Result<Case> {
    let mut model = Model::new(&toy_config())?;
    jitter_params(&mut model.store, 80);
    let depth = atmos::depth_ramp(16, 16, 0.1, 2.0, true);
    let clear = random(&[3, 16, 16], 0.05, 0.9, 81);
    let item = EvalItem {
        id: "gradcheck".into(),
        tier: crate::fogbench::FogTier::Moderate,
        beta: 1.0,
        a: 0.8,
        hazy: atmos::synthesize_fog(&clear, &depth, 1.0, [0.8; 3])?,
        density: random(&[16, 16], 0.0, 0.02, 82),
        t: atmos::transmission(&depth, 1.0),
    };
    let store = model.store.clone();
    Ok(params("end-to-end total loss", store, move |t, s| {
        let mut m = model.clone();
        m.store = s.clone();
        Ok(sample_loss(t, &m, &item)?.total)
    }))
}

pub fn all_cases() -> Result<Vec<Case>> {
    let mut cases = primitive_cases();
    cases.extend(module_cases());
    cases.push(end_to_end_case()?);
    Ok(cases)
}

/// Runs every case at `tol`.
pub fn run_suite(tol: f64) -> Result<Vec<SuiteEntry>> {
    all_cases()?
        .iter()
        .map(|c| {
            let r = c.run(tol)?;
            Ok(SuiteEntry {
                name: c.name.clone(),
                coords: r.analytic.len(),
                max_rel_err: r.max_rel_err,
                passed: r.passed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_cases_pass() {
        for c in module_cases() {
            let r = c.run(DEFAULT_TOL).unwrap();
            assert!(r.passed, "{}: {} at {} (a={}, n={})", c.name, r.max_rel_err, r.worst, r.analytic[r.worst], r.numeric[r.worst]);
        }
    }

    #[test]
    fn end_to_end_objective_passes() {
        let c = end_to_end_case().unwrap();
        let r = c.run(DEFAULT_TOL).unwrap();
        assert!(r.passed, "{} at {} (a={}, n={})", r.max_rel_err, r.worst, r.analytic[r.worst], r.numeric[r.worst]);
        assert!(r.analytic.len() > 50);
        assert!(r.analytic.iter().filter(|g| g.abs() > 0.0).count() > r.analytic.len() / 2);
    }
}
