//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `h`, over every coordinate of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point)?;
        let out = f(&mut tape, v)?;
        let value = tape.scalar(out);
        if !value.is_finite() {
            return Err(Error::Contract(format!("f(x) is not finite ({value})")));
        }
        Ok(value)
    };

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_grad())?;
        let out = f(&mut tape, v)?;
        if !tape.scalar(out).is_finite() {
            return Err(Error::Contract("f(x) is not finite".into()));
        }
        let grads = tape.backward(out)?;
        grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.values_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// One probed coordinate in a parameter-level audit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub param: ParamId,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Finite-difference audit of selected coordinates of a parameter store.
///
/// `loss` evaluates the scalar objective for the store as it currently is;
/// `analytic` holds the accumulated gradients of that same objective.
pub fn check_params<F>(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    h: f64,
    mut loss: F,
) -> Result<Vec<ProbeResult>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut out = Vec::with_capacity(probes.len());
    for &(id, index) in probes {
        let analytic = store
            .tensor(id)
            .grad()
            .map(|g| g[index])
            .ok_or_else(|| Error::Contract(format!("{} is frozen", store.param(id).name)))?;
        let orig = store.tensor(id).values()[index];
        store.param_mut(id).tensor.values_mut()[index] = orig + h;
        let up = loss(store);
        store.param_mut(id).tensor.values_mut()[index] = orig - h;
        let down = loss(store);
        store.param_mut(id).tensor.values_mut()[index] = orig;
        let (up, down) = (up?, down?);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Contract("loss is not finite under perturbation".into()));
        }
        let numeric = (up - down) / (2.0 * h);
        out.push(ProbeResult {
            param: id,
            name: store.param(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}
