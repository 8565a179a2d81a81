//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::net::ParamVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("optimizer lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("optimizer {name} must lie in (0, 1)")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer weight_decay must be >= 0".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("optimizer epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state: moment estimates plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamWConfig,
}

impl OptState {
    pub fn new(param_len: usize, config: AdamWConfig) -> Self {
        Self {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
            config,
        }
    }
}

/// One AdamW update, in place. With a non-finite gradient the parameters and
/// state are left untouched.
///
/// `param -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)`
pub fn adamw_step(params: &mut ParamVector, grads: &[f64], state: &mut OptState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "gradient",
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }

    let c = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        let p = &mut params.values[i];
        *p -= c.lr * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layout, LayoutEntry};

    fn params_of(values: Vec<f64>) -> ParamVector {
        let layout = Layout {
            entries: vec![LayoutEntry {
                name: "w0".into(),
                offset: 0,
                rows: values.len(),
                cols: 1,
            }],
        };
        ParamVector { values, layout }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = params_of(vec![0.3, -1.7, 2.0]);
        let before = params.values.clone();
        let mut state = OptState::new(
            3,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        for _ in 0..5 {
            adamw_step(&mut params, &[0.0; 3], &mut state).unwrap();
        }
        assert_eq!(params.values, before);
        assert_eq!(state.step_count, 5);
    }

    #[test]
    fn zero_grad_with_decay_scales_params() {
        let lambda = 0.01;
        let lr = 0.1;
        let mut params = params_of(vec![1.0, -2.0]);
        let mut state = OptState::new(
            2,
            AdamWConfig {
                lr,
                weight_decay: lambda,
                ..AdamWConfig::default()
            },
        );
        for step in 1..=3 {
            adamw_step(&mut params, &[0.0; 2], &mut state).unwrap();
            let scale = (1.0 - lr * lambda).powi(step);
            assert!((params.values[0] - scale).abs() < 1e-15);
            assert!((params.values[1] + 2.0 * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m_hat = v_hat = 1 after one step, so param' = 1 - lr / (1 + eps).
        let mut params = params_of(vec![1.0]);
        let mut state = OptState::new(
            1,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        adamw_step(&mut params, &[1.0], &mut state).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params.values[0] - expected).abs() < 1e-12);
        assert!((params.values[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_leaves_params_untouched() {
        let mut params = params_of(vec![1.0, 2.0]);
        let before = params.clone();
        let mut state = OptState::new(2, AdamWConfig::default());
        let err = adamw_step(&mut params, &[0.5, f64::INFINITY], &mut state);
        assert!(matches!(err, Err(Error::NonFiniteGradient { index: 1 })));
        assert_eq!(params, before);
        assert_eq!(state.step_count, 0);
    }
}
