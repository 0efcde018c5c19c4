//! Training objective and counting metrics.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_WINDOW: usize = 7;
/// Guard added to the joint maximum before normalizing SSIM inputs.
pub const SSIM_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_physics: f64,
    pub lambda_reg: f64,
    pub alpha_ssim: f64,
    pub lambda_weight: f64,
    pub lambda_smooth: f64,
    pub lambda_edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_physics: 0.5,
            lambda_reg: 1e-4,
            alpha_ssim: 0.1,
            lambda_weight: 1.0,
            lambda_smooth: 0.1,
            lambda_edge: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_physics", self.lambda_physics),
            ("lambda_reg", self.lambda_reg),
            ("alpha_ssim", self.alpha_ssim),
            ("lambda_weight", self.lambda_weight),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_edge", self.lambda_edge),
        ];
        match all.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            Some((name, v)) => Err(Error::Config(format!("{name} = {v} must be a nonnegative finite number"))),
            None => Ok(()),
        }
    }
}

fn same_shape(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// Mean SSIM over uniform 7×7 windows of two `[H, W]` maps, after scaling
/// both by their joint maximum. Maps smaller than the window use a single
/// global window.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::invalid("ssim", format!("expected a 2-D map, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let (kh, kw) = if h < SSIM_WINDOW || w < SSIM_WINDOW { (h, w) } else { (SSIM_WINDOW, SSIM_WINDOW) };
    let joint = Var::concat(&[a.reshape(&[h * w])?, b.reshape(&[h * w])?], 0)?.max_all()?;
    let scale = joint.add_scalar(SSIM_NORM_EPS);
    let (a, b) = (a.div(scale)?, b.div(scale)?);
    let mu_a = a.window_mean_valid(kh, kw)?;
    let mu_b = b.window_mean_valid(kh, kw)?;
    let var_a = a.square().window_mean_valid(kh, kw)?.sub(mu_a.square())?;
    let var_b = b.square().window_mean_valid(kh, kw)?.sub(mu_b.square())?;
    let cov = a.mul(b)?.window_mean_valid(kh, kw)?.sub(mu_a.mul(mu_b)?)?;
    let num = mu_a
        .mul(mu_b)?
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .mul(cov.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mu_a
        .square()
        .add(mu_b.square())?
        .add_scalar(SSIM_C1)
        .mul(var_a.add(var_b)?.add_scalar(SSIM_C2))?;
    Ok(num.div(den)?.mean())
}

/// `mean|D - D_gt| + α (1 - SSIM(D, D_gt))`.
pub fn density_loss<'t>(d: Var<'t>, gt: Var<'t>, alpha_ssim: f64) -> Result<Var<'t>> {
    same_shape("density_loss", d, gt)?;
    let l1 = d.sub(gt)?.abs().mean();
    if alpha_ssim == 0.0 {
        return Ok(l1);
    }
    l1.add(ssim(d, gt)?.neg().add_scalar(1.0).mul_scalar(alpha_ssim))
}

/// Predicted physical quantities.
#[derive(Clone, Copy)]
pub struct PhysicsPrediction<'t> {
    pub t: Var<'t>,
    pub beta: Var<'t>,
    pub a: Var<'t>,
}

/// Ground truth, any part of which may be unknown.
#[derive(Clone, Copy, Default)]
pub struct PhysicsTruth<'t> {
    pub t: Option<Var<'t>>,
    pub beta: Option<Var<'t>>,
    pub a: Option<Var<'t>>,
}

pub struct PhysicsLoss<'t> {
    pub value: Var<'t>,
    /// Names of the terms skipped for lack of ground truth.
    pub skipped: Vec<&'static str>,
}

/// `mean (t - t_gt)² + (β - β_gt)² + Σ_c (A_c - A_gt,c)²`, skipping terms
/// whose ground truth is missing.
pub fn physics_loss<'t>(tape: &'t Tape, pred: PhysicsPrediction<'t>, truth: PhysicsTruth<'t>) -> Result<PhysicsLoss<'t>> {
    let mut value = tape.scalar(0.0);
    let mut skipped = Vec::new();
    match truth.t {
        Some(t) => {
            same_shape("physics_loss", pred.t, t)?;
            value = value.add(pred.t.sub(t)?.square().mean())?;
        }
        None => skipped.push("t"),
    }
    match truth.beta {
        Some(b) => value = value.add(pred.beta.reshape(&[1])?.sub(b.reshape(&[1])?)?.square().sum())?,
        None => skipped.push("beta"),
    }
    match truth.a {
        Some(a) => {
            same_shape("physics_loss", pred.a, a)?;
            value = value.add(pred.a.sub(a)?.square().sum())?;
        }
        None => skipped.push("A"),
    }
    Ok(PhysicsLoss { value, skipped })
}

/// `λ_weight Σ‖W‖² + λ_smooth Σ (c_{i+1} - 2c_i + c_{i-1})²` over dense
/// weights and spline coefficient rows of `store`.
pub fn regularization_loss<'t>(tape: &'t Tape, store: &ParamStore, weights: &LossWeights) -> Result<Var<'t>> {
    let mut total = tape.scalar(0.0);
    for id in store.ids() {
        match store.kind(id) {
            ParamKind::Weight if weights.lambda_weight != 0.0 => {
                let w = tape.param(store, id);
                total = total.add(w.square().sum().mul_scalar(weights.lambda_weight))?;
            }
            ParamKind::Spline if weights.lambda_smooth != 0.0 => {
                let c = tape.param(store, id);
                let s = c.shape();
                let nb = *s.last().expect("spline tensors have a coefficient axis");
                if nb < 3 {
                    continue;
                }
                let rows = c.len() / nb;
                let c = c.reshape(&[rows, nb])?;
                let second = c
                    .narrow(1, 2, nb - 2)?
                    .sub(c.narrow(1, 1, nb - 2)?.mul_scalar(2.0))?
                    .add(c.narrow(1, 0, nb - 2)?)?;
                total = total.add(second.square().sum().mul_scalar(weights.lambda_smooth))?;
            }
            _ => {}
        }
    }
    Ok(total)
}

#[derive(Clone, Copy)]
pub struct LossParts<'t> {
    pub density: Var<'t>,
    pub physics: Option<Var<'t>>,
    pub regularization: Var<'t>,
}

/// `L_density + λ_physics L_physics + λ_reg L_reg`.
pub fn total_loss<'t>(parts: LossParts<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    let mut total = parts.density;
    if let Some(p) = parts.physics {
        total = total.add(p.mul_scalar(weights.lambda_physics))?;
    }
    total.add(parts.regularization.mul_scalar(weights.lambda_reg))
}

/// Mean absolute count error and root mean squared count error.
pub fn mae_mse(gt: &[f64], pred: &[f64]) -> Result<(f64, f64)> {
    if gt.is_empty() || gt.len() != pred.len() {
        return Err(Error::invalid("mae_mse", format!("need equal nonempty lists, got {} and {}", gt.len(), pred.len())));
    }
    let m = gt.len() as f64;
    let mae = gt.iter().zip(pred).map(|(g, p)| (g - p).abs()).sum::<f64>() / m;
    let mse = (gt.iter().zip(pred).map(|(g, p)| (g - p).powi(2)).sum::<f64>() / m).sqrt();
    Ok((mae, mse))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, Tensor};

    fn rand_map(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
        Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    /// Sliding-window SSIM computed pixel by pixel.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let m = a.data().iter().chain(b.data()).cloned().fold(f64::MIN, f64::max) + SSIM_NORM_EPS;
        let (kh, kw) = if h < 7 || w < 7 { (h, w) } else { (7, 7) };
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..=h - kh {
            for j in 0..=w - kw {
                let n = (kh * kw) as f64;
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in i..i + kh {
                    for c in j..j + kw {
                        let x = a.at(&[r, c]) / m;
                        let y = b.at(&[r, c]) / m;
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (va, vb, cab) = (saa / n - ma * ma, sbb / n - mb * mb, sab / n - ma * mb);
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1.0;
            }
        }
        total / count
    }

    fn ssim_of(a: &Tensor, b: &Tensor) -> f64 {
        let tape = Tape::no_grad();
        ssim(tape.constant(a), tape.constant(b)).unwrap().item()
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_map(&mut rng, 16, 16);
        let b = rand_map(&mut rng, 16, 16);
        assert!((ssim_of(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(ssim_of(&a, &b), ssim_of(&b, &a));
        assert!((ssim_of(&a, &b) - ssim_oracle(&a, &b)).abs() < 1e-10);
        let a8 = rand_map(&mut rng, 8, 8);
        let b8 = rand_map(&mut rng, 8, 8);
        assert!((ssim_of(&a8, &b8) - ssim_oracle(&a8, &b8)).abs() < 1e-10);
        let a5 = rand_map(&mut rng, 5, 6);
        let b5 = rand_map(&mut rng, 5, 6);
        assert!((ssim_of(&a5, &b5) - ssim_oracle(&a5, &b5)).abs() < 1e-10);
    }

    #[test]
    fn density_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = rand_map(&mut rng, 8, 8);
        let tape = Tape::no_grad();
        let g = tape.constant(&gt);
        assert!(density_loss(g, g, 0.1).unwrap().item().abs() < 1e-12);
        let shifted = tape.constant(&gt.map(|v| v + 0.25));
        assert!((density_loss(shifted, g, 0.0).unwrap().item() - 0.25).abs() < 1e-12);
        assert!(density_loss(g, tape.constant(&Tensor::zeros(&[8, 7])), 0.1).is_err());
    }

    #[test]
    fn physics_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::no_grad();
        let t = tape.constant(&rand_map(&mut rng, 4, 4));
        let beta = tape.constant(&Tensor::scalar(1.0));
        let a = tape.constant(&Tensor::from_vec(vec![0.8, 0.7, 0.9]));
        let pred = PhysicsPrediction { t, beta, a };
        let exact = PhysicsTruth {
            t: Some(t),
            beta: Some(beta),
            a: Some(a),
        };
        assert_eq!(physics_loss(&tape, pred, exact).unwrap().value.item(), 0.0);

        let off = PhysicsTruth {
            beta: Some(tape.constant(&Tensor::scalar(0.7))),
            ..exact
        };
        assert!((physics_loss(&tape, pred, off).unwrap().value.item() - 0.09).abs() < 1e-12);

        let tt = rand_map(&mut rng, 4, 4);
        let at = [0.6, 0.75, 0.85];
        let truth = PhysicsTruth {
            t: Some(tape.constant(&tt)),
            beta: Some(tape.constant(&Tensor::scalar(1.4))),
            a: Some(tape.constant(&Tensor::from_vec(at.to_vec()))),
        };
        let got = physics_loss(&tape, pred, truth).unwrap().value.item();
        let tp = t.to_tensor();
        let map: f64 = (0..16).map(|k| (tp.data()[k] - tt.data()[k]).powi(2)).sum::<f64>() / 16.0;
        let expect = map + 0.16 + (0.2f64.powi(2) + 0.05f64.powi(2) + 0.05f64.powi(2));
        assert!((got - expect).abs() < 1e-12);

        let partial = physics_loss(&tape, pred, PhysicsTruth::default()).unwrap();
        assert_eq!(partial.value.item(), 0.0);
        assert_eq!(partial.skipped, vec!["t", "beta", "A"]);
    }

    #[test]
    fn regularization_examples_and_oracle() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, Tensor::zeros(&[3, 2]));
        let c = store.add("c", ParamKind::Spline, Tensor::zeros(&[2, 5]));
        store.add("b", ParamKind::Bias, Tensor::full(&[3], 4.0));
        let lw = LossWeights::default();
        let tape = Tape::no_grad();
        assert_eq!(regularization_loss(&tape, &store, &lw).unwrap().item(), 0.0);

        store.set(c, &[0.5, 1.0, 1.5, 2.0, 2.5, -1.0, -3.0, -5.0, -7.0, -9.0]).unwrap();
        assert!(regularization_loss(&tape, &store, &lw).unwrap().item().abs() < 1e-24);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wv: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cv: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.set(w, &wv).unwrap();
        store.set(c, &cv).unwrap();
        let mut expect = wv.iter().map(|v| v * v).sum::<f64>();
        let mut smooth = 0.0;
        for row in cv.chunks(5) {
            for i in 1..4 {
                smooth += (row[i + 1] - 2.0 * row[i] + row[i - 1]).powi(2);
            }
        }
        expect += 0.1 * smooth;
        assert!((regularization_loss(&tape, &store, &lw).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::no_grad();
        let parts = LossParts {
            density: tape.scalar(0.3),
            physics: Some(tape.scalar(0.2)),
            regularization: tape.scalar(50.0),
        };
        let zero = LossWeights {
            lambda_physics: 0.0,
            lambda_reg: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(parts, &zero).unwrap().item(), 0.3);
        let got = total_loss(parts, &LossWeights::default()).unwrap().item();
        assert!((got - (0.3 + 0.5 * 0.2 + 1e-4 * 50.0)).abs() < 1e-15);
        let none = LossParts {
            density: tape.scalar(0.0),
            physics: Some(tape.scalar(0.0)),
            regularization: tape.scalar(0.0),
        };
        assert_eq!(total_loss(none, &LossWeights::default()).unwrap().item(), 0.0);
        assert!(LossWeights { alpha_ssim: -1.0, ..LossWeights::default() }.validate().is_err());
    }

    #[test]
    fn metrics_examples() {
        let (mae, mse) = mae_mse(&[10.0, 20.0], &[12.0, 17.0]).unwrap();
        assert_eq!(mae, 2.5);
        assert!((mse - 6.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae_mse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), (0.0, 0.0));
        assert!(mae_mse(&[], &[]).is_err());
        assert!(mae_mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = rand_map(&mut rng, 9, 10);
        let x = rand_map(&mut rng, 9, 10).map(|v| v + 0.05);
        let r = grad_check(|t, d| density_loss(d, t.constant(&gt), 0.1), &x, 1e-6, 1e-4).unwrap();
        assert!(r.passed, "density {}", r.max_rel_err);

        let tt = rand_map(&mut rng, 4, 4);
        let r = grad_check(
            |t, v| {
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
                Ok(physics_loss(t, pred, truth)?.value)
            },
            &rand_map(&mut rng, 1, 20).reshape(&[20]).unwrap(),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "physics {}", r.max_rel_err);
    }

    proptest! {
        #[test]
        fn metrics_match_scalar_oracle(pairs in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..100)) {
            let gt: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let (mae, mse) = mae_mse(&gt, &pred).unwrap();
            let mut sa = 0.0;
            let mut sq = 0.0;
            for k in 0..gt.len() {
                sa += (gt[k] - pred[k]).abs();
                sq += (gt[k] - pred[k]) * (gt[k] - pred[k]);
            }
            let m = gt.len() as f64;
            prop_assert!((mae - sa / m).abs() <= 1e-12 * (1.0 + mae));
            prop_assert!((mse - (sq / m).sqrt()).abs() <= 1e-12 * (1.0 + mse));
        }

        #[test]
        fn ssim_bounded_and_losses_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_map(&mut rng, 8, 9);
            let b = rand_map(&mut rng, 8, 9);
            let s = ssim_of(&a, &b);
            prop_assert!(s <= 1.0 && s >= -1.0);
            prop_assert!(s < 1.0);
            let tape = Tape::no_grad();
            prop_assert!(density_loss(tape.constant(&a), tape.constant(&b), 0.1).unwrap().item() >= 0.0);
        }

        #[test]
        fn density_loss_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_map(&mut rng, 1, 12);
            let b = rand_map(&mut rng, 1, 12);
            let mut perm: Vec<usize> = (0..12).collect();
            for i in (1..12).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let p = |t: &Tensor| Tensor::new(&[1, 12], perm.iter().map(|&k| t.data()[k]).collect()).unwrap();
            let tape = Tape::no_grad();
            let l1 = density_loss(tape.constant(&a), tape.constant(&b), 0.1).unwrap().item();
            let l2 = density_loss(tape.constant(&p(&a)), tape.constant(&p(&b)), 0.1).unwrap().item();
            prop_assert!((l1 - l2).abs() < 1e-12);
        }
    }
}
