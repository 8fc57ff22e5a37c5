//! Central finite-difference gradient checking.

use crate::autodiff::{Record, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps * max(1, |x|)`.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over
/// every entry of every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Record<T>, &[Var]) -> Result<Var>,
{
    for (k, t) in inputs.iter().enumerate() {
        if let Some(index) = t.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { input: k, index });
        }
    }
    let analytic = analytic_grads(&f, inputs)?;
    let eval = |tensors: &[Tensor<T>]| -> Result<f64> {
        let mut rec = Record::new();
        let vars: Vec<Var> = tensors.iter().map(|t| rec.leaf(t.clone())).collect();
        let out = f(&mut rec, &vars)?;
        Ok(rec.value(out).item().as_f64())
    };

    let mut worst = 0f64;
    let mut work: Vec<Tensor<T>> = inputs.iter().map(|t| t.clone().with_requires_grad(false)).collect();
    for (k, grads) in analytic.iter().enumerate() {
        for (index, &a) in grads.iter().enumerate() {
            let x = inputs[k].values()[index];
            let h = eps * x.as_f64().abs().max(1.0);
            work[k].values_mut()[index] = T::from_f64(x.as_f64() + h);
            let plus = eval(&work)?;
            work[k].values_mut()[index] = T::from_f64(x.as_f64() - h);
            let minus = eval(&work)?;
            work[k].values_mut()[index] = x;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { input: k, index });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Analytic gradients of `f` with respect to each input.
pub fn analytic_grads<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&mut Record<T>, &[Var]) -> Result<Var>,
{
    let mut rec = Record::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| rec.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut rec, &vars)?;
    rec.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match rec.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect())
}
