//! Bias-corrected Adam shared by every trainable model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            config,
        }
    }
}

/// One Adam update in place. Moments are kept in `f64` regardless of parameter width.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powf(state.step as f64);
    let bc2 = 1.0 - c.beta2.powf(state.step as f64);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g.to_f64().unwrap();
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let update = c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        *p = T::from_f64_lossy(p.to_f64().unwrap() - update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.5_f64, -2.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![0.5, -2.0]);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = vec![0.0_f32, 0.0];
        let mut s = AdamState::new(2, AdamConfig::default());
        for _ in 0..100 {
            adam_step(&mut p, &[1.5, -0.2], &mut s).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
        // Bias-corrected Adam moves by about lr per step under a constant gradient.
        assert!((p[0] + 100.0 * 3e-4).abs() < 1e-4);
    }

    #[test]
    fn minimizes_scalar_quadratic() {
        let mut w = vec![1.0_f64];
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(1, cfg);
        for _ in 0..500 {
            let g = vec![2.0 * w[0]];
            adam_step(&mut w, &g, &mut s).unwrap();
        }
        assert!(w[0].abs() < 0.01, "{}", w[0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m̂ = g, v̂ = g², so the first update is lr·g/(|g|+ε).
        let mut p = vec![1.0_f64];
        let mut s = AdamState::new(1, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        adam_step(&mut p, &[4.0], &mut s).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![1.0_f64; 3];
        let mut s = AdamState::new(3, AdamConfig::default());
        assert!(adam_step(&mut p, &[1.0; 2], &mut s).is_err());
        let mut s = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut p, &[1.0; 3], &mut s).is_err());
    }
}
