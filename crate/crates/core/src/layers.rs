//! Dense building blocks shared by the model stages.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{self, ParamId, ParamKind, ParamStore};

/// Stride-1 2-D convolution over `[C, H, W]` maps with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pad: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let w = params::he(rng, &[c_out, c_in, k, k], c_in * k * k);
        Self::from_tensors(store, name, w, Tensor::zeros(&[c_out]))
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Self::from_tensors(store, name, Tensor::zeros(&[c_out, c_in, k, k]), Tensor::zeros(&[c_out]))
    }

    fn from_tensors(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Self {
        let k = w.shape()[2];
        Self {
            weight: store.add(format!("{name}.w"), ParamKind::Weight, w),
            bias: store.add(format!("{name}.b"), ParamKind::Bias, b),
            pad: k / 2,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(tape.param(store, self.weight), Some(tape.param(store, self.bias)), self.pad)
    }
}

/// Row-wise affine map `x: [n, in] -> x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = params::glorot(rng, &[d_out, d_in], d_in, d_out);
        Self {
            weight: store.add(format!("{name}.w"), ParamKind::Weight, w),
            bias: bias.then(|| store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[d_out]))),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(tape.param(store, self.weight).t()?)?;
        match self.bias {
            Some(b) => y.add(tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// `ceil(n / 2)`, the spatial size after one 2× pooling step.
pub(crate) fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2× average pooling that tolerates odd extents.
pub(crate) fn pool2(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    x.adaptive_avg_pool(half(h), half(w))
}
