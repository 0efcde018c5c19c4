//! Named learnable tensors shared by every model component.

use rand::Rng;

use crate::autodiff::{Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; dense weights are penalized by weight decay and
/// spline coefficients by the curvature penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Spline,
    Other,
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            kind,
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Adds each parameter's gradient from `grads` into its accumulator.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        let mut seen: Vec<ParamId> = grads.param_ids().collect();
        seen.sort();
        seen.dedup();
        for id in seen {
            if let Some(g) = grads.param(id) {
                self.params[id.0].tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.params[id.0].tensor;
        if t.len() != data.len() {
            return Err(Error::shape("set", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Sets every value of a parameter to `value`.
    pub fn fill(&mut self, id: ParamId, value: f64) {
        self.params[id.0].tensor.data_mut().iter_mut().for_each(|v| *v = value);
    }
}

/// Uniform `U(-bound, bound)` tensor.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Glorot-style uniform init for a layer with the given fan-in and fan-out.
pub fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, bound)
}

/// He-style uniform init for ReLU layers.
pub fn he(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}
