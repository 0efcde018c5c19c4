//! Central finite-difference checks of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    /// Position (into the checked coordinate list) of the largest error.
    pub worst: usize,
    /// Set when a forward evaluation produced a non-finite value.
    pub failure: Option<String>,
    pub passed: bool,
}

impl GradCheckReport {
    fn build(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64, failure: Option<String>) -> Self {
        let rel_err: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .collect();
        let (worst, max_rel_err) = rel_err
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |(bi, bv), (i, v)| if v > bv || v.is_nan() { (i, v) } else { (bi, bv) });
        let passed = failure.is_none() && max_rel_err <= tol;
        Self {
            analytic,
            numeric,
            rel_err,
            max_rel_err,
            worst,
            failure,
            passed,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::invalid("grad_check", format!("step {step} outside (0, 1e-3]")));
    }
    Ok(())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_step(step)?;
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_requires_grad(true));
        let y = f(&tape, xv)?;
        if !y.item().is_finite() {
            let failure = Some("non-finite forward value at the base point".to_string());
            return Ok(GradCheckReport::build(vec![f64::NAN], vec![f64::NAN], tol, failure));
        }
        let grads = tape.backward(y)?;
        grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::no_grad();
        let xv = tape.constant(t);
        Ok(f(&tape, xv)?.item())
    };
    let mut numeric = vec![0.0; x.len()];
    let mut failure = None;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            failure.get_or_insert_with(|| format!("non-finite forward value at coordinate {i}"));
        }
        numeric[i] = (fp - fm) / (2.0 * step);
    }
    Ok(GradCheckReport::build(analytic, numeric, tol, failure))
}

/// Same check over selected `(parameter, flat index)` coordinates of a model
/// whose scalar objective is built by `f`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    f: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    check_step(step)?;
    let tape = Tape::new();
    let y = f(&tape, store)?;
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(p, i)| grads.param(p).map_or(0.0, |g| g[i]))
        .collect();
    let mut probe = store.clone();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut failure = None;
    for (k, &(p, i)) in coords.iter().enumerate() {
        let orig = probe.tensor(p).data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            probe.tensor_mut(p).data_mut()[i] = v;
            let tape = Tape::no_grad();
            Ok(f(&tape, &probe)?.item())
        };
        let fp = eval(orig + step)?;
        let fm = eval(orig - step)?;
        probe.tensor_mut(p).data_mut()[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            failure.get_or_insert_with(|| format!("non-finite forward value at coordinate {k} ({} [{i}])", store.name(p)));
        }
        numeric.push((fp - fm) / (2.0 * step));
    }
    Ok(GradCheckReport::build(analytic, numeric, tol, failure))
}
