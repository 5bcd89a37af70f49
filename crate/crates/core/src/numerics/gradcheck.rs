//! Central-difference gradient checking.

use super::tape::{Bound, Tape, Var};
use super::tensor::ParamSet;
use super::Scalar;
use crate::error::{KtError, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Pins a closure to the higher-ranked signature expected by the checkers.
pub fn loss_fn<T, F>(f: F) -> F
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    f
}

/// Gradient of `loss_fn` over every coordinate of `params`, by backpropagation.
pub fn analytic_gradient<T, F>(params: &ParamSet<T>, loss_fn: &F) -> Result<Vec<f64>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    let mut work = params.clone();
    work.zero_grad();
    let tape = Tape::new();
    let bound = work.bind(&tape);
    let loss = loss_fn(&tape, &bound)?;
    tape.backward(loss)?.accumulate_into(&mut work)?;
    Ok(work.flat_grads().into_iter().map(Scalar::as_f64).collect())
}

fn evaluate<T, F>(params: &ParamSet<T>, loss_fn: &F) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let value = loss_fn(&tape, &bound)?.scalar()?.as_f64();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(KtError::NonFinite {
            op: "grad_check loss".into(),
        })
    }
}

/// Central-difference estimate `(L(x + eps) - L(x - eps)) / 2 eps` per coordinate.
pub fn numeric_gradient<T, F>(params: &ParamSet<T>, eps: f64, loss_fn: &F) -> Result<Vec<f64>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    if T::MANTISSA_DIGITS < f64::MANTISSA_DIGITS {
        return Err(KtError::Contract(
            "finite differences require at least 64-bit precision".into(),
        ));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(KtError::Range(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.num_values());
    for k in 0..params.num_values() {
        let (ti, off) = work.locate(k).expect("coordinate in range");
        let original = work.tensors_mut()[ti].data()[off];
        work.tensors_mut()[ti].data_mut()[off] = original + T::of(eps);
        let plus = evaluate(&work, loss_fn)?;
        work.tensors_mut()[ti].data_mut()[off] = original - T::of(eps);
        let minus = evaluate(&work, loss_fn)?;
        work.tensors_mut()[ti].data_mut()[off] = original;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Worst `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)` over aligned coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Maximum relative error between backpropagated and finite-difference gradients.
pub fn grad_check<T, F>(params: &ParamSet<T>, eps: f64, loss_fn: F) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    let numeric = numeric_gradient(params, eps, &loss_fn)?;
    let analytic = analytic_gradient(params, &loss_fn)?;
    Ok(max_relative_error(&analytic, &numeric))
}
