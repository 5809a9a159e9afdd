//! Central finite-difference gradient checks.

use crate::autograd::{BoundParams, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective)
    }
}

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-8)`
/// for a scalar function of one tensor.
pub fn grad_check<E, F>(loss: F, point: &Tensor<E>, step: f64) -> Result<f64>
where
    E: Element,
    F: for<'g> Fn(&'g Graph<E>, Var<'g, E>) -> Result<Var<'g, E>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |p: Tensor<E>| -> Result<f64> {
        let g = Graph::new();
        let out = loss(&g, g.leaf(p))?;
        finite(out.value().item().as_f64())
    };
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let out = loss(&g, x)?;
    finite(out.value().item().as_f64())?;
    let grads = g.backward(out)?;
    let zeros = Tensor::zeros(point.shape());
    let analytic = grads.get(x).unwrap_or(&zeros).clone();

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += E::from_f64(step);
        let mut minus = point.clone();
        minus.data_mut()[i] -= E::from_f64(step);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Gradient check over every scalar of every parameter in `store`.
pub fn grad_check_params<E, F>(store: &ParamStore<E>, loss: F, step: f64) -> Result<ParamCheckReport>
where
    E: Element,
    F: for<'g> Fn(&'g Graph<E>, &BoundParams<'g, E>) -> Result<Var<'g, E>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |s: &ParamStore<E>| -> Result<f64> {
        let g = Graph::new();
        let p = g.bind(s);
        finite(loss(&g, &p)?.value().item().as_f64())
    };
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    {
        let g = Graph::new();
        let p = g.bind(&with_grads);
        let out = loss(&g, &p)?;
        finite(out.value().item().as_f64())?;
        g.backward(out)?.accumulate_into(&mut with_grads);
    }

    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + E::from_f64(step);
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - E::from_f64(step);
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = with_grads.get(id).grad.data()[i].as_f64();
            let err = rel_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
