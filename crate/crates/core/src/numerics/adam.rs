//! Adam with bias correction and global gradient-norm clipping.

use super::{NumericsError, ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global L2 norm of the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(0.1) }
    }
}

/// First and second moment estimates for one [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, m: zeros(), v: zeros() }
    }

    /// Applies one update and advances `params.step`. Returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Tensor]) -> Result<f64, NumericsError> {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(NumericsError::NonFiniteGradient);
        }
        let factor = clip_factor(norm, self.config.clip_norm);
        params.step += 1;
        let t = params.step as i32;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (tensor, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] * factor;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Multiplier applied to every gradient entry before the moment updates.
pub fn clip_factor(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn single(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.add("w", Tensor::scalar(value)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single(0.7);
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.tensors()[0].item(), 0.7);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = single(1.0);
        let cfg = AdamConfig { lr: 0.01, clip_norm: None, ..AdamConfig::default() };
        let mut adam = Adam::new(&p, cfg);
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new();
                let set = g.bind(&p);
                let w = g.param(set, p.id("w").unwrap());
                let sq = g.mul(w, w).unwrap();
                let loss = g.sum(sq);
                g.backward(loss).unwrap().into_set(set)
            };
            adam.step(&mut p, &grads).unwrap();
        }
        assert!(p.tensors()[0].item().abs() < 1e-3, "w = {}", p.tensors()[0].item());
    }

    #[test]
    fn clipping_scales_large_gradients() {
        // A norm-10 gradient clipped to 0.1 is scaled by 0.01.
        let grads = [Tensor::from_vec(1, 2, vec![6.0, 8.0])];
        let norm = global_norm(&grads);
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((clip_factor(norm, Some(0.1)) - 0.01).abs() < 1e-15);
        assert_eq!(clip_factor(0.05, Some(0.1)), 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = single(0.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        let err = adam.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteGradient));
        assert_eq!(p.step, 0);
    }
}
