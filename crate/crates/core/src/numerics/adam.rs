//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;
use super::Scalar;
use crate::error::{KtError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(KtError::Config(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub hyper: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(hyper: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            hyper,
        }
    }

    /// One update of every parameter from its accumulated gradient.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(KtError::shape(
                "adam_step",
                &[params.len()],
                &[self.first_moment.len()],
            ));
        }
        self.step_count += 1;
        let step = self.step_count;
        for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tensor.len()],
            };
            adam_update(
                tensor.data_mut(),
                &grad,
                &mut self.first_moment[k],
                &mut self.second_moment[k],
                step,
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

/// In-place Adam update of one parameter buffer at 1-based step `step`.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    hyper: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(KtError::shape(
            "adam_step",
            &[param.len()],
            &[grad.len(), m.len(), v.len()],
        ));
    }
    if step == 0 {
        return Err(KtError::Contract("Adam steps are counted from 1".into()));
    }
    let b1 = T::of(hyper.beta1);
    let b2 = T::of(hyper.beta2);
    let lr = T::of(hyper.learning_rate);
    let eps = T::of(hyper.epsilon);
    let bias1 = T::one() - T::of(hyper.beta1.powi(step as i32));
    let bias2 = T::one() - T::of(hyper.beta2.powi(step as i32));
    for k in 0..param.len() {
        let g = grad[k];
        m[k] = b1 * m[k] + (T::one() - b1) * g;
        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
        let m_hat = m[k] / bias1;
        let v_hat = v[k] / bias2;
        param[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        if !param[k].is_finite() {
            return Err(KtError::NonFinite {
                op: "adam_step".into(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.3, -1.25, 0.0, -0.0];
        let before: Vec<u64> = p.iter().map(|v: &f64| v.to_bits()).collect();
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        adam_update(&mut p, &[0.0; 4], &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
        let after: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_by_learning_rate_along_sign() {
        let hyper = AdamConfig::default();
        let g = [0.5, -3.0, 1e-2];
        let mut p = vec![0.0; 3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update(&mut p, &g, &mut m, &mut v, 1, &hyper).unwrap();
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        for (x, gi) in p.iter().zip(g) {
            let expected = -hyper.learning_rate * gi / (gi.abs() + hyper.epsilon);
            assert!((x - expected).abs() < 1e-15);
            assert!((x.abs() - hyper.learning_rate).abs() < 1e-8);
        }
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut params = ParamSet::<f64>::new();
            let id = params.add("w", Tensor::vector(&[1.0, -2.0]).unwrap());
            let mut state = AdamState::new(AdamConfig::default(), &params);
            for _ in 0..5 {
                params.zero_grad();
                params.get_mut(id).accumulate_grad(&[0.3, -0.1]).unwrap();
                state.step(&mut params).unwrap();
            }
            (params.flat_values(), state.step_count)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, 5);
        assert_eq!(sb, 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &AdamConfig::default()).is_err());
    }
}
