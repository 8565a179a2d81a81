//! Rectified-flow mathematics: interpolation, the flow-matching loss,
//! deterministic reverse-time integration, and clean/noise predictions.
//!
//! Conventions: data lives at `t = 0`, pure noise at `t = 1`, and the
//! interpolation is `x_t = (1 - t) x0 + t x1`. Given a velocity `v` at
//! `(x, t)` the endpoint predictions are
//!
//! ```text
//! x1_hat = x + (1 - t) v        (predicted noise)
//! x0_hat = x - t v              (predicted clean point)
//! ```
//!
//! which exactly invert the interpolation when `v = x1 - x0`.

use crate::error::{Error, Result};
use crate::net::{forward, EvalPoint, NetConfig, NetLoss, ParamVector};

/// A point on a denoising path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Vec<f64>,
    pub t: f64,
}

/// Descending time grid from exactly 1 to exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `steps` transitions (so `steps + 1` grid times).
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        let times = (0..=steps)
            .map(|k| (steps - k) as f64 / steps as f64)
            .collect();
        Ok(Self { times })
    }

    /// Custom grid; must strictly decrease from 1 to 0.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::Config(
                "time grid must run from exactly 1 to exactly 0".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("time grid must be strictly decreasing".into()));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Width of transition `k` (from `times[k]` down to `times[k + 1]`).
    pub fn dt(&self, k: usize) -> f64 {
        self.times[k] - self.times[k + 1]
    }
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect()
}

/// Predicted noise endpoint `x + (1 - t) v`.
pub fn predict_noise(x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| xi + (1.0 - t) * vi).collect()
}

/// Predicted clean endpoint `x - t v`.
pub fn predict_clean(x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| xi - t * vi).collect()
}

/// One reverse-time Euler step of the flow ODE.
pub fn ode_step(
    config: &NetConfig,
    params: &ParamVector,
    state: &FlowState,
    dt: f64,
    context: usize,
) -> Result<FlowState> {
    if dt > state.t {
        return Err(Error::StepTooLarge { t: state.t, dt });
    }
    let v = forward(config, params, &state.x, state.t, context)?;
    let x = state
        .x
        .iter()
        .zip(&v)
        .map(|(xi, vi)| xi - vi * dt)
        .collect();
    Ok(FlowState {
        x,
        t: state.t - dt,
    })
}

/// Clean-point estimate by integrating the flow ODE from `t` to 0 over
/// `substeps` uniform Euler steps. `substeps = 1` reduces to
/// [`predict_clean`]; at `t = 0` the state is returned unchanged.
pub fn multistep_denoise(
    config: &NetConfig,
    params: &ParamVector,
    x: &[f64],
    t: f64,
    substeps: usize,
    context: usize,
) -> Result<Vec<f64>> {
    assert!(substeps >= 1, "multistep_denoise needs substeps >= 1");
    if t == 0.0 {
        return Ok(x.to_vec());
    }
    let mut state = FlowState { x: x.to_vec(), t };
    for j in (0..substeps).rev() {
        // Lands on t * j / substeps; the final step hits exactly 0.
        let target = t * j as f64 / substeps as f64;
        let dt = state.t - target;
        state = ode_step(config, params, &state, dt, context)?;
        state.t = target;
    }
    Ok(state.x)
}

/// One flow-matching training item.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub context: usize,
}

/// Mean squared velocity error over a batch:
/// `mean_i ||(x1 - x0) - v(x_t, t, c)||^2`.
pub struct FlowMatchLoss {
    points: Vec<EvalPoint>,
    targets: Vec<Vec<f64>>,
}

impl FlowMatchLoss {
    pub fn new(batch: &[FlowSample]) -> Self {
        let points = batch
            .iter()
            .map(|s| EvalPoint {
                x: interpolate(&s.x0, &s.x1, s.t),
                t: s.t,
                context: s.context,
            })
            .collect();
        let targets = batch
            .iter()
            .map(|s| s.x1.iter().zip(&s.x0).map(|(b, a)| b - a).collect())
            .collect();
        Self { points, targets }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl NetLoss for FlowMatchLoss {
    fn eval_points(&self) -> &[EvalPoint] {
        &self.points
    }

    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let n = outputs.len() as f64;
        let mut value = 0.0;
        let mut cots = Vec::with_capacity(outputs.len());
        for (v, target) in outputs.iter().zip(&self.targets) {
            let mut cot = Vec::with_capacity(v.len());
            for (vi, ti) in v.iter().zip(target) {
                let r = vi - ti;
                value += r * r / n;
                cot.push(2.0 * r / n);
            }
            cots.push(cot);
        }
        (value, cots)
    }
}

/// Flow-matching loss of a batch under the given parameters.
pub fn fm_loss(config: &NetConfig, params: &ParamVector, batch: &[FlowSample]) -> Result<f64> {
    assert!(!batch.is_empty(), "fm_loss needs a nonempty batch");
    crate::net::loss_value(config, params, &FlowMatchLoss::new(batch))
}
