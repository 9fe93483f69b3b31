//! Adam with bias correction and coupled L2 weight decay (the decay term is
//! added to the gradient before the moment update).

use crate::error::{Error, Result};
use crate::graph::GradMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<F> {
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    pub weight_decay: F,
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        Self {
            learning_rate: F::cast_from(1e-5),
            beta1: F::cast_from(0.7),
            beta2: F::cast_from(0.8),
            epsilon: F::cast_from(1e-8),
            weight_decay: F::zero(),
        }
    }
}

/// First/second moment estimates per parameter plus the shared step counter.
pub struct AdamState<F: Scalar> {
    pub cfg: AdamConfig<F>,
    t: u64,
    moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(cfg: AdamConfig<F>) -> Self {
        Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter present in `grads`. Parameters missing
    /// from the gradient map are left untouched. A non-finite gradient aborts
    /// the step before any parameter is modified.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<F>>,
        grads: &GradMap<F>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name:?} at step {}",
                    self.t + 1
                )));
            }
            let param = params.get(name).ok_or_else(|| {
                Error::State(format!("gradient for unknown parameter {name:?}"))
            })?;
            if param.dims() != grad.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name:?} dims {:?} vs gradient {:?}",
                    param.dims(),
                    grad.dims()
                )));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let one = F::one();
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.cfg;
        let bias1 = one - beta1.powi(t);
        let bias2 = one - beta2.powi(t);

        for (name, grad) in grads {
            let param = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.dims()), Tensor::zeros(grad.dims())));
            for ((p, g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                let g = *g + weight_decay * *p;
                *m = beta1 * *m + (one - beta1) * g;
                *v = beta2 * *v + (one - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p - learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_param(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert("w".into(), Tensor::scalar(v));
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(0.5);
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(0.0));
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].item().unwrap(), 0.5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // g=1: m_hat = 0.3/0.3 = 1, v_hat = 0.2/0.2 = 1, so delta = -lr/(1+eps).
        let mut params = one_param(0.0);
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(1.0));
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut params, &grads).unwrap();
        assert_relative_eq!(params["w"].item().unwrap(), -1e-5, max_relative = 1e-7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = one_param(0.0);
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(f64::NAN));
        let mut state = AdamState::new(AdamConfig::default());
        let err = state.step(&mut params, &grads).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert_eq!(state.step_count(), 0);
    }
}
