use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use super::NumericsError;

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameters, iterated in sorted name order.
///
/// Single writer: `backward` and the optimizer mutate it, everything else
/// only reads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), NumericsError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NumericsError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>, NumericsError> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>, NumericsError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), NumericsError> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(NumericsError::Shape {
                op: "param set",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &[T]) -> Result<(), NumericsError> {
        let p = self.get_mut(name)?;
        if p.grad.numel() != grad.len() {
            return Err(NumericsError::Length {
                shape: p.grad.shape().to_vec(),
                len: grad.len(),
            });
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += *d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.l2_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Per-parameter value norms, for diagnostics.
    pub fn value_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.l2_norm()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}
