//! Central-difference verification of taped gradients.

use std::collections::BTreeMap;

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Largest relative error between the taped gradient of `f` at `x` and its
/// central difference with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let params = BTreeMap::from([("x".to_string(), x.clone())]);
    let errs = grad_check_named(|tape, vars| f(tape, vars["x"]), &params, h)?;
    Ok(errs["x"])
}

/// Per-tensor maximum relative error over a named set of inputs.
///
/// `f` is re-run on a fresh tape for every perturbation, so any randomness
/// inside it must be reseeded per call.
pub fn grad_check_named<F>(f: F, params: &BTreeMap<String, Tensor>, h: f64) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |ps: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, ps);
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let loss = f(&mut tape, &vars)?;
    let analytic = tape.backward(loss)?.named(&tape);

    let mut work = params.clone();
    let mut report = BTreeMap::new();
    for (name, value) in params {
        let mut worst: f64 = 0.0;
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[name].data()[i], numeric));
        }
        report.insert(name.clone(), worst);
    }
    Ok(report)
}

fn bind(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
        .collect()
}
