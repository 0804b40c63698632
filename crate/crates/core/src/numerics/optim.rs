use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use super::NumericsError;

/// Hyperparameters of the decoupled-weight-decay adaptive-moment optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, p)| (k.to_string(), Tensor::zeros(p.value.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        OptimState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// Bias correction is folded into the step size, so `eps` is added to the
    /// uncorrected `sqrt(v)`:
    /// `p ← p − lr·wd·p − lr·sqrt(1−β₂ᵗ)/(1−β₁ᵗ) · m / (sqrt(v) + eps)`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<(), NumericsError> {
        for (name, p) in params.iter() {
            if !p.grad.is_finite() {
                return Err(NumericsError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let step_size = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let decay = T::lit(c.lr * c.weight_decay);
        let step_size = T::lit(step_size);
        for (name, p) in params.iter_mut() {
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
            let v = self
                .second
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
            let grad = p.grad.data().to_vec();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                md[i] = b1 * md[i] + (one - b1) * g;
                vd[i] = b2 * vd[i] + (one - b2) * g * g;
                *w -= decay * *w;
                *w -= step_size * md[i] / (vd[i].sqrt() + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for (_, p) in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
