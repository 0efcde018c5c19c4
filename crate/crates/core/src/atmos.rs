//! Atmospheric scattering: fog synthesis, airlight and scattering estimation,
//! the three-stage transmission estimate and physical restoration.
//!
//! Images are `[3, H, W]` tensors in `[0, 1]`; transmission and depth maps are
//! `[H, W]`.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{half, pool2, Conv2d};
use crate::params::{ParamId, ParamKind, ParamStore};

pub const A_MIN: f64 = 0.5;
pub const A_MAX: f64 = 0.95;

/// Luma weights for the guided-filter guide.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Per-image fog parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FogParams {
    pub a: [f64; 3],
    pub beta: f64,
    pub t: Tensor,
}

fn image_dims(img: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match img {
        [3, h, w] => Ok((*h, *w)),
        _ => Err(Error::invalid(op, format!("expected a [3, H, W] image, got {img:?}"))),
    }
}

/// Linear depth ramp from `d_min` to `d_max`. With `far_top` the top row is
/// the farthest; otherwise depth grows downwards.
pub fn depth_ramp(h: usize, w: usize, d_min: f64, d_max: f64, far_top: bool) -> Tensor {
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let frac = if h > 1 { r as f64 / (h - 1) as f64 } else { 0.0 };
        let frac = if far_top { 1.0 - frac } else { frac };
        data.extend(std::iter::repeat(d_min + (d_max - d_min) * frac).take(w));
    }
    Tensor::new(&[h, w], data).expect("ramp shape")
}

/// `e^{-β d}` per pixel.
pub fn transmission(depth: &Tensor, beta: f64) -> Tensor {
    depth.map(|d| (-beta * d).exp())
}

/// `I = J t + A (1 - t)` with `t = e^{-β d}`, clamped to `[0, 1]`.
pub fn synthesize_fog(j: &Tensor, depth: &Tensor, beta: f64, a: [f64; 3]) -> Result<Tensor> {
    let (h, w) = image_dims(j.shape(), "synthesize_fog")?;
    if depth.shape() != [h, w] {
        return Err(Error::shape("synthesize_fog", j.shape(), depth.shape()));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid("synthesize_fog", format!("beta {beta} must be finite and nonnegative")));
    }
    if depth.data().iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::invalid("synthesize_fog", "depth must be finite and nonnegative"));
    }
    if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("synthesize_fog", format!("airlight {a:?} outside [0, 1]")));
    }
    let t = transmission(depth, beta);
    let mut out = j.data().to_vec();
    for c in 0..3 {
        for (k, v) in out[c * h * w..(c + 1) * h * w].iter_mut().enumerate() {
            let tk = t.data()[k];
            *v = (*v * tk + a[c] * (1.0 - tk)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(j.shape(), out)
}

/// `1 - ω · min_{Ω} min_c I^c / A^c`, with the dark channel clamped to `[0, 1]`
/// so the result lies in `[1 - ω, 1]`.
pub fn dark_channel_transmission<'t>(i: Var<'t>, a: Var<'t>, window: usize, omega: f64) -> Result<Var<'t>> {
    let (h, w) = image_dims(&i.shape(), "dark_channel_transmission")?;
    if a.len() != 3 {
        return Err(Error::shape("dark_channel_transmission", &a.shape(), &[3]));
    }
    if a.value().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("dark_channel_transmission", "airlight must be positive in every channel"));
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::invalid("dark_channel_transmission", format!("omega {omega} outside (0, 1]")));
    }
    let ratio = i.div(a.reshape(&[3, 1, 1])?)?;
    let dark = ratio.min_axis(0)?.reshape(&[h, w])?.window_min(window)?;
    Ok(dark.clamp(0.0, 1.0).mul_scalar(-omega).add_scalar(1.0))
}

/// Grayscale guide `Σ_c LUMA_c I^c`.
pub fn luma<'t>(i: Var<'t>) -> Result<Var<'t>> {
    let (h, w) = image_dims(&i.shape(), "luma")?;
    let wts = i.tape().constant(&Tensor::new(&[3, 1, 1], LUMA.to_vec())?);
    i.mul(wts)?.sum_axis(0)?.reshape(&[h, w])
}

/// Guided filter with edge-truncated box means of radius `r`; output clamped
/// to `[0, 1]`.
pub fn guided_filter<'t>(guide: Var<'t>, p: Var<'t>, r: usize, eps: f64) -> Result<Var<'t>> {
    if !(eps > 0.0) {
        return Err(Error::invalid("guided_filter", format!("eps {eps} must be positive")));
    }
    if r == 0 {
        return Err(Error::invalid("guided_filter", "radius must be at least 1"));
    }
    if guide.shape() != p.shape() || guide.shape().len() != 2 {
        return Err(Error::shape("guided_filter", &guide.shape(), &p.shape()));
    }
    let mean_i = guide.box_mean(r)?;
    let mean_p = p.box_mean(r)?;
    let corr_ip = guide.mul(p)?.box_mean(r)?;
    let corr_ii = guide.square().box_mean(r)?;
    let var_i = corr_ii.sub(mean_i.square())?;
    let cov_ip = corr_ip.sub(mean_i.mul(mean_p)?)?;
    let a = cov_ip.div_eps(var_i, eps)?;
    let b = mean_p.sub(a.mul(mean_i)?)?;
    let q = a.box_mean(r)?.mul(guide)?.add(b.box_mean(r)?)?;
    Ok(q.clamp(0.0, 1.0))
}

/// `(I - A(1 - t)) / max(t, t_min)`, clamped to `[0, 1]`.
pub fn dehaze<'t>(i: Var<'t>, a: Var<'t>, t: Var<'t>, t_min: f64) -> Result<Var<'t>> {
    let (h, w) = image_dims(&i.shape(), "dehaze")?;
    if t.shape() != [h, w] {
        return Err(Error::shape("dehaze", &i.shape(), &t.shape()));
    }
    if !(t_min > 0.0 && t_min < 1.0) {
        return Err(Error::invalid("dehaze", format!("t_min {t_min} outside (0, 1)")));
    }
    let a = a.reshape(&[3, 1, 1])?;
    let t3 = t.reshape(&[1, h, w])?;
    let air = a.mul(t3.neg().add_scalar(1.0))?;
    let num = i.sub(air)?;
    let den = t3.clamp(t_min, f64::INFINITY);
    Ok(num.div(den)?.clamp(0.0, 1.0))
}

/// Transmission refinement loss: pixel MSE plus `λ_edge` times the MSE of
/// forward-difference gradients.
pub fn refine_loss<'t>(t_refined: Var<'t>, t_gt: Var<'t>, lambda_edge: f64) -> Result<Var<'t>> {
    if t_refined.shape() != t_gt.shape() {
        return Err(Error::shape("refine_loss", &t_refined.shape(), &t_gt.shape()));
    }
    let pix = t_refined.sub(t_gt)?.square().mean();
    let gx = t_refined.diff_x()?.sub(t_gt.diff_x()?)?.square().mean();
    let gy = t_refined.diff_y()?.sub(t_gt.diff_y()?)?.square().mean();
    pix.add(gx.add(gy)?.mul_scalar(lambda_edge))
}

/// Classical airlight estimate: among the brightest 0.1% of dark-channel
/// pixels, the color of the one with the highest intensity, clamped to
/// `[A_MIN, A_MAX]`.
pub fn estimate_airlight_dcp(i: &Tensor, window: usize) -> Result<[f64; 3]> {
    let (h, w) = image_dims(i.shape(), "estimate_airlight_dcp")?;
    let tape = Tape::no_grad();
    let dark = tape.constant(i).min_axis(0)?.reshape(&[h, w])?.window_min(window)?.to_tensor();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&x, &y| dark.data()[y].total_cmp(&dark.data()[x]).then(x.cmp(&y)));
    let top = ((h * w) as f64 * 1e-3).ceil().max(1.0) as usize;
    let px = |k: usize| [i.data()[k], i.data()[h * w + k], i.data()[2 * h * w + k]];
    let best = order[..top]
        .iter()
        .copied()
        .max_by(|&x, &y| px(x).iter().sum::<f64>().total_cmp(&px(y).iter().sum::<f64>()).then(y.cmp(&x)))
        .expect("nonempty image");
    Ok(px(best).map(|v| v.clamp(A_MIN, A_MAX)))
}

/// Small from-scratch feature stack: 3→16→32→32→32 channels of 3×3 ReLU
/// convolutions on a 2×-downsampled input with pooling after the first two.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<Conv2d>,
}

impl Backbone {
    pub const CHANNELS: usize = 32;

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Self {
        let widths = [3, 16, 32, 32, 32];
        let convs = (0..4)
            .map(|l| Conv2d::new(store, rng, &format!("{name}.c{l}"), widths[l], widths[l + 1], 3))
            .collect();
        Self { convs }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, i: Var<'t>) -> Result<Var<'t>> {
        let mut x = pool2(i)?;
        for (l, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, store, x)?.relu();
            if l < 2 {
                x = pool2(x)?;
            }
        }
        Ok(x)
    }
}

/// Scattering and airlight heads plus the multi-scale fused feature.
#[derive(Clone, Debug)]
pub struct ParamEstimator {
    scale_convs: Vec<(usize, Conv2d)>,
    scale_logits: ParamId,
    conv_beta: Conv2d,
    conv_a: Conv2d,
    beta_max: f64,
}

pub struct Estimate<'t> {
    pub beta: Var<'t>,
    pub a: Var<'t>,
    /// Head output before the `[A_MIN, A_MAX]` clip.
    pub a_raw: Var<'t>,
    pub f_multi: Var<'t>,
}

impl ParamEstimator {
    pub const SCALES: [usize; 3] = [1, 2, 4];

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, beta_max: f64) -> Self {
        let scale_convs = Self::SCALES
            .iter()
            .map(|&s| (s, Conv2d::new(store, rng, &format!("{name}.ms{s}"), channels, channels, 3)))
            .collect();
        let scale_logits = store.add(format!("{name}.scale_logits"), ParamKind::Other, Tensor::zeros(&[3]));
        let conv_beta = Conv2d::zeroed(store, &format!("{name}.beta"), 2 * channels, 1, 1);
        let conv_a = Conv2d::zeroed(store, &format!("{name}.airlight"), channels, 3, 1);
        store.fill(conv_a.bias, 0.5 * (A_MIN + A_MAX));
        Self {
            scale_convs,
            scale_logits,
            conv_beta,
            conv_a,
            beta_max,
        }
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn heads(&self) -> (&Conv2d, &Conv2d) {
        (&self.conv_beta, &self.conv_a)
    }

    pub fn scale_logits(&self) -> ParamId {
        self.scale_logits
    }

    /// `F_multi = Σ_s softmax(w)_s · up(conv_s(down_s(F)))`.
    pub fn fuse<'t>(&self, tape: &'t Tape, store: &ParamStore, f: Var<'t>) -> Result<Var<'t>> {
        let shape = f.shape();
        let (h, w) = (shape[1], shape[2]);
        let ws = tape.param(store, self.scale_logits).softmax(0)?;
        let mut acc: Option<Var<'t>> = None;
        for (k, (s, conv)) in self.scale_convs.iter().enumerate() {
            let down = if *s == 1 { f } else { f.adaptive_avg_pool(h.div_ceil(*s), w.div_ceil(*s))? };
            let mut y = conv.forward(tape, store, down)?;
            if *s != 1 {
                y = y.upsample_nearest(h, w)?;
            }
            let term = y.mul(ws.narrow(0, k, 1)?)?;
            acc = Some(match acc {
                Some(v) => v.add(term)?,
                None => term,
            });
        }
        Ok(acc.expect("three scales"))
    }

    /// β and A are read off the fused feature `F_multi`. The β head sees
    /// its input divided by the per-pixel channel RMS.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, f: Var<'t>) -> Result<Estimate<'t>> {
        let f_multi = self.fuse(tape, store, f)?;
        let shape = f_multi.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let global = f_multi.global_avg_pool()?.reshape(&[c, 1, 1])?;
        let both = Var::concat(&[global.broadcast_to(&[c, h, w])?, f_multi], 0)?;
        let rms = both
            .square()
            .mean_axis(0)?
            .sqrt_eps(1e-12)
            .reshape(&[1, h, w])?
            .broadcast_to(&[2 * c, h, w])?;
        let both = both.div_eps(rms, 1e-6)?;
        let beta = self
            .conv_beta
            .forward(tape, store, both)?
            .mean()
            .sigmoid()
            .mul_scalar(self.beta_max);
        let a_raw = self.conv_a.forward(tape, store, global)?.reshape(&[3])?;
        let a = a_raw.clamp(A_MIN, A_MAX);
        Ok(Estimate { beta, a, a_raw, f_multi })
    }
}

/// Two-level encoder-decoder predicting a residual on the logit of the initial
/// transmission. The last layer starts at zero, so the initial output equals
/// the input transmission.
#[derive(Clone, Debug)]
pub struct Refiner {
    enc1: Conv2d,
    enc2: Conv2d,
    mid: Conv2d,
    dec2: Conv2d,
    dec1: Conv2d,
}

/// Guard keeping `logit(t)` finite at `t ∈ {0, 1}`.
pub const LOGIT_EPS: f64 = 1e-13;

impl Refiner {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize) -> Self {
        Self {
            enc1: Conv2d::new(store, rng, &format!("{name}.enc1"), 4, width, 3),
            enc2: Conv2d::new(store, rng, &format!("{name}.enc2"), width, width, 3),
            mid: Conv2d::new(store, rng, &format!("{name}.mid"), width, width, 3),
            dec2: Conv2d::new(store, rng, &format!("{name}.dec2"), 2 * width, width, 3),
            dec1: Conv2d::zeroed(store, &format!("{name}.dec1"), 2 * width, 1, 3),
        }
    }

    pub fn output_layer(&self) -> &Conv2d {
        &self.dec1
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, t_init: Var<'t>, i: Var<'t>) -> Result<Var<'t>> {
        let (h, w) = image_dims(&i.shape(), "refine_transmission")?;
        if t_init.shape() != [h, w] {
            return Err(Error::shape("refine_transmission", &t_init.shape(), &i.shape()));
        }
        let x = Var::concat(&[t_init.reshape(&[1, h, w])?, i], 0)?;
        let e1 = self.enc1.forward(tape, store, x)?.relu();
        let e2 = self.enc2.forward(tape, store, pool2(e1)?)?.relu();
        let m = self.mid.forward(tape, store, pool2(e2)?)?.relu();
        let u2 = Var::concat(&[m.upsample_nearest(half(h), half(w))?, e2], 0)?;
        let d2 = self.dec2.forward(tape, store, u2)?.relu();
        let u1 = Var::concat(&[d2.upsample_nearest(h, w)?, e1], 0)?;
        let residual = self.dec1.forward(tape, store, u1)?.reshape(&[h, w])?;
        Ok(t_init.logit_eps(LOGIT_EPS).add(residual)?.sigmoid())
    }
}
