//! Toy generative task: a 2-D Gaussian mixture with discrete contexts.
//!
//! Contexts carry two things: the mixture weights used when sampling
//! pretraining data for that context, and a target mode id the reward
//! functions point at. The default task pretrains every context on the full
//! four-mode mixture (so the context embedding starts out uninformative) and
//! rewards proximity to one mode per context, leaving the RL stage something
//! to learn.

use crate::error::{Error, Result};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

/// One isotropic mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMode {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

/// Per-context sampling weights and reward target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    /// Mixture weights over the task modes used for pretraining data.
    pub pretrain_weights: Vec<f64>,
    /// Mode id the reward for this context points at.
    pub reward_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub modes: Vec<GaussianMode>,
    pub contexts: Vec<ContextSpec>,
}

impl ToyTask {
    /// Four modes at (+-1, +-1) with std 0.15; one context per mode, each
    /// pretrained on the full mixture.
    pub fn four_mode_default() -> Self {
        let corners = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        let modes = corners
            .iter()
            .map(|m| GaussianMode {
                mean: m.to_vec(),
                std: 0.15,
                weight: 1.0,
            })
            .collect();
        let contexts = (0..4)
            .map(|target| ContextSpec {
                pretrain_weights: vec![1.0; 4],
                reward_target: target,
            })
            .collect();
        Self { modes, contexts }
    }

    pub fn dim(&self) -> usize {
        self.modes.first().map_or(0, |m| m.mean.len())
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("task.modes must be nonempty".into()));
        }
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::Config("task.modes[0].mean must be nonempty".into()));
        }
        for (i, mode) in self.modes.iter().enumerate() {
            if mode.mean.len() != dim {
                return Err(Error::Config(format!(
                    "task.modes[{i}].mean has dimension {} but mode 0 has {dim}",
                    mode.mean.len()
                )));
            }
            if mode.std <= 0.0 {
                return Err(Error::Config(format!("task.modes[{i}].std must be positive")));
            }
            if mode.weight < 0.0 {
                return Err(Error::Config(format!(
                    "task.modes[{i}].weight must be nonnegative"
                )));
            }
        }
        if self.contexts.is_empty() {
            return Err(Error::Config("task.contexts must be nonempty".into()));
        }
        for (c, ctx) in self.contexts.iter().enumerate() {
            if ctx.pretrain_weights.len() != self.modes.len() {
                return Err(Error::Config(format!(
                    "task.contexts[{c}].pretrain_weights needs one weight per mode"
                )));
            }
            if ctx.pretrain_weights.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!(
                    "task.contexts[{c}].pretrain_weights must sum to a positive value"
                )));
            }
            if ctx.reward_target >= self.modes.len() {
                return Err(Error::Config(format!(
                    "task.contexts[{c}].reward_target {} out of range ({} modes)",
                    ctx.reward_target,
                    self.modes.len()
                )));
            }
        }
        Ok(())
    }

    /// Draws one data point for the given context.
    pub fn sample_data(&self, context: usize, rng: &mut Stream) -> Result<Vec<f64>> {
        let ctx = self
            .contexts
            .get(context)
            .ok_or(Error::UnknownContext {
                context,
                available: self.contexts.len(),
            })?;
        let total: f64 = ctx.pretrain_weights.iter().sum();
        let mut pick = rng.uniform_open() * total;
        let mut mode_idx = self.modes.len() - 1;
        for (i, w) in ctx.pretrain_weights.iter().enumerate() {
            if pick < *w {
                mode_idx = i;
                break;
            }
            pick -= w;
        }
        let mode = &self.modes[mode_idx];
        Ok(mode
            .mean
            .iter()
            .map(|m| m + mode.std * rng.standard_normal())
            .collect())
    }

    /// Log-density of the context's pretraining mixture at `x`.
    pub fn mixture_log_density(&self, context: usize, x: &[f64]) -> Result<f64> {
        let ctx = self
            .contexts
            .get(context)
            .ok_or(Error::UnknownContext {
                context,
                available: self.contexts.len(),
            })?;
        let total: f64 = ctx.pretrain_weights.iter().sum();
        let dim = self.dim() as f64;
        let mut acc = f64::NEG_INFINITY;
        for (mode, w) in self.modes.iter().zip(&ctx.pretrain_weights) {
            if *w == 0.0 {
                continue;
            }
            let sq: f64 = x
                .iter()
                .zip(&mode.mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let logp = (w / total).ln()
                - 0.5 * dim * (std::f64::consts::TAU).ln()
                - dim * mode.std.ln()
                - sq / (2.0 * mode.std * mode.std);
            // log-sum-exp accumulation
            if logp > acc {
                acc = logp + (acc - logp).exp().ln_1p();
            } else {
                acc += (logp - acc).exp().ln_1p();
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn default_task_validates() {
        let task = ToyTask::four_mode_default();
        task.validate().unwrap();
        assert_eq!(task.dim(), 2);
        assert_eq!(task.num_contexts(), 4);
    }

    #[test]
    fn samples_land_near_some_mode() {
        let task = ToyTask::four_mode_default();
        let mut rng = StreamKey::new(1).rng();
        for _ in 0..500 {
            let x = task.sample_data(0, &mut rng).unwrap();
            let nearest = task
                .modes
                .iter()
                .map(|m| {
                    m.mean
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1.0, "sample {x:?} far from every mode");
        }
    }

    #[test]
    fn context_weights_restrict_modes() {
        let mut task = ToyTask::four_mode_default();
        task.contexts[0].pretrain_weights = vec![0.0, 1.0, 0.0, 0.0];
        let mut rng = StreamKey::new(2).rng();
        for _ in 0..200 {
            let x = task.sample_data(0, &mut rng).unwrap();
            assert!((x[0] + 1.0).abs() < 1.0 && (x[1] - 1.0).abs() < 1.0);
        }
    }

    #[test]
    fn log_density_matches_single_gaussian() {
        let task = ToyTask {
            modes: vec![GaussianMode {
                mean: vec![0.0, 0.0],
                std: 1.0,
                weight: 1.0,
            }],
            contexts: vec![ContextSpec {
                pretrain_weights: vec![1.0],
                reward_target: 0,
            }],
        };
        let logp = task.mixture_log_density(0, &[0.0, 0.0]).unwrap();
        assert!((logp + (std::f64::consts::TAU).ln()).abs() < 1e-12);
    }

    #[test]
    fn validation_catches_bad_targets() {
        let mut task = ToyTask::four_mode_default();
        task.contexts[1].reward_target = 9;
        assert!(task.validate().is_err());
    }
}
