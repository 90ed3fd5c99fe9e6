//! Central-difference gradient checks used by the test suites.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Relative error convention shared by both checkers.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite_loss(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v}")));
    }
    Ok(v)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for
/// the gradient of scalar `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    finite_loss(&tape, loss)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe, false);
        let loss = f(&mut tape, xv)?;
        finite_loss(&tape, loss)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Gradient check over every parameter in `store`.
///
/// At most `max_coords` coordinates are probed per parameter (evenly
/// strided), so large projection matrices stay affordable.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    finite_loss(&tape, loss)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        finite_loss(&tape, loss)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    let mut probe = store.clone();
    for (id, name, value) in store.iter() {
        let analytic = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let stride = value.numel().div_ceil(max_coords.max(1)).max(1);
        for i in (0..value.numel()).step_by(stride) {
            let orig = value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let err = rel_error(analytic.data()[i], (up - down) / (2.0 * eps));
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.to_string();
            }
        }
    }
    Ok(report)
}
