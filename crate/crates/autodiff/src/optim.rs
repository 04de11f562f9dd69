//! Adam optimizer over a named parameter store.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state: first/second moments per parameter plus the step count used
/// for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        let (b1t, b2t, eps) = (lit::<T>(b1), lit::<T>(b2), lit::<T>(self.config.eps));
        let step_size = lit::<T>(lr / bc1);
        let bc2_sqrt = lit::<T>(bc2.sqrt());
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1t * *mv + (T::one() - b1t) * gv;
                *vv = b2t * *vv + (T::one() - b2t) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_parts([2], vec![1.0f64, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_parts([2], vec![0.5f64, -2.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &grads, 0.1);
        let w = params.get("w").unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_parts([1], vec![3.0f64]));
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let x = params.get("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::from_parts([1], vec![2.0 * (x - 1.0)]));
            adam.step(&mut params, &grads, 0.01);
        }
        assert!((params.get("x").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}
