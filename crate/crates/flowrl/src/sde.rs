//! Stochastic samplers and their Gaussian transition laws.
//!
//! Two steppers share one interface. The Euler-Maruyama stepper discretizes
//! the marginal-matched SDE
//!
//! ```text
//! x' = x - [v - (sigma^2 / 2t) x1_hat] dt + sigma sqrt(dt) eps
//! ```
//!
//! and the DDIM-style stepper mixes the endpoint predictions directly:
//!
//! ```text
//! x' = (1 - (t - dt)) x0_hat + sqrt((t - dt)^2 - sigma^2) x1_hat + sigma eps
//! ```
//!
//! Both collapse to the deterministic flow ODE at `sigma = 0`. Every
//! transition is Gaussian with an isotropic std, which is what makes
//! log-probabilities, ratios, and KL terms closed-form.

use crate::error::{Error, Result};
use crate::exec;
use crate::flow::{ode_step, predict_clean, predict_noise, FlowState, TimeGrid};
use crate::net::{forward, NetConfig, ParamVector};
use crate::rng::StreamKey;
use crate::stats;
use serde::{Deserialize, Serialize};

/// Noise schedule family for the stochastic samplers.
///
/// `Ddim` is the annealed schedule `eta (t - dt) sqrt(1 - t)`; the
/// `DdimUniform` (`eta (t - dt)`) and `DdimTSqrt` (`eta t sqrt(1 - t)`)
/// variants are exposed for experiments. `DdimTSqrt` is infeasible on the
/// last transition of a grid that ends at exactly 0 and is rejected there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSchedule {
    Flowgrpo { a: f64 },
    Ddim { eta: f64 },
    DdimUniform { eta: f64 },
    DdimTSqrt { eta: f64 },
    Zero,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::Flowgrpo { a } => {
                if a <= 0.0 {
                    return Err(Error::Config("flowgrpo schedule needs a > 0".into()));
                }
            }
            NoiseSchedule::Ddim { eta }
            | NoiseSchedule::DdimUniform { eta }
            | NoiseSchedule::DdimTSqrt { eta } => {
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::Config("ddim schedule needs eta in [0, 1]".into()));
                }
            }
            NoiseSchedule::Zero => {}
        }
        Ok(())
    }
}

/// Schedule value for the transition from `t` down to `t - dt`.
///
/// The flowgrpo schedule diverges at `t = 1`, so its argument is clamped to
/// `min(t, 1 - dt/2)`: the first discrete transition then carries finite
/// noise.
pub fn sigma(schedule: &NoiseSchedule, t: f64, dt: f64) -> f64 {
    debug_assert!(t > 0.0 && dt > 0.0 && dt <= t);
    match *schedule {
        NoiseSchedule::Flowgrpo { a } => {
            let tc = t.min(1.0 - dt / 2.0);
            a * (tc / (1.0 - tc)).sqrt()
        }
        NoiseSchedule::Ddim { eta } => eta * (t - dt) * (1.0 - t).max(0.0).sqrt(),
        NoiseSchedule::DdimUniform { eta } => eta * (t - dt),
        NoiseSchedule::DdimTSqrt { eta } => eta * t * (1.0 - t).max(0.0).sqrt(),
        NoiseSchedule::Zero => 0.0,
    }
}

/// An isotropic Gaussian transition law.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTransition {
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Euler-Maruyama transition law at `(x, t)` for velocity `v`.
pub fn em_transition(
    x: &[f64],
    t: f64,
    dt: f64,
    v: &[f64],
    sigma_t: f64,
) -> Result<GaussianTransition> {
    if t == 0.0 {
        return Err(Error::ZeroTime);
    }
    if dt > t {
        return Err(Error::StepTooLarge { t, dt });
    }
    let noise_pred = predict_noise(x, t, v);
    let shrink = sigma_t * sigma_t / (2.0 * t);
    let mean = x
        .iter()
        .zip(v)
        .zip(&noise_pred)
        .map(|((xi, vi), ni)| xi - (vi - shrink * ni) * dt)
        .collect();
    Ok(GaussianTransition {
        mean,
        std: sigma_t * dt.sqrt(),
    })
}

/// One Euler-Maruyama step: `mean + std * eps`.
pub fn em_step(x: &[f64], t: f64, dt: f64, v: &[f64], sigma_t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    let law = em_transition(x, t, dt, v, sigma_t)?;
    Ok(apply_noise(&law, eps))
}

/// DDIM-style transition law from endpoint predictions.
pub fn ddim_transition(
    clean_pred: &[f64],
    noise_pred: &[f64],
    t: f64,
    dt: f64,
    sigma_t: f64,
) -> Result<GaussianTransition> {
    if dt > t {
        return Err(Error::StepTooLarge { t, dt });
    }
    let s = t - dt;
    if sigma_t > s {
        return Err(Error::ScheduleInfeasible {
            t,
            dt,
            sigma: sigma_t,
            limit: s,
        });
    }
    let noise_coeff = (s * s - sigma_t * sigma_t).sqrt();
    let mean = clean_pred
        .iter()
        .zip(noise_pred)
        .map(|(c, n)| (1.0 - s) * c + noise_coeff * n)
        .collect();
    Ok(GaussianTransition { mean, std: sigma_t })
}

/// One DDIM-style step: `mean + std * eps`.
pub fn ddim_step(
    clean_pred: &[f64],
    noise_pred: &[f64],
    t: f64,
    dt: f64,
    sigma_t: f64,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let law = ddim_transition(clean_pred, noise_pred, t, dt, sigma_t)?;
    Ok(apply_noise(&law, eps))
}

fn apply_noise(law: &GaussianTransition, eps: &[f64]) -> Vec<f64> {
    law.mean.iter().zip(eps).map(|(m, e)| m + law.std * e).collect()
}

/// The three `x1_hat` coefficients at play when comparing the steppers:
/// the DDIM square root, the exact marginal-matching coefficient, and its
/// Taylor approximation.
pub fn coefficient_gap(t: f64, dt: f64, sigma_t: f64) -> (f64, f64, f64) {
    let s = t - dt;
    debug_assert!(sigma_t <= s);
    let ddim = (s * s - sigma_t * sigma_t).sqrt();
    let exact = s - sigma_t * sigma_t / (2.0 * t);
    let taylor = s - sigma_t * sigma_t / (2.0 * s);
    (ddim, exact, taylor)
}

/// Isotropic Gaussian log-density of `x` under a transition law, summed over
/// dimensions.
pub fn gaussian_logprob(x: &[f64], law: &GaussianTransition) -> Result<f64> {
    if law.std <= 0.0 {
        return Err(Error::DegenerateTransition);
    }
    let d = x.len() as f64;
    let sq: f64 = x
        .iter()
        .zip(&law.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(-0.5 * d * std::f64::consts::TAU.ln() - d * law.std.ln() - sq / (2.0 * law.std * law.std))
}

/// Closed-form KL between isotropic Gaussian transitions.
pub fn gaussian_kl(p: &GaussianTransition, q: &GaussianTransition) -> Result<f64> {
    if p.std <= 0.0 || q.std <= 0.0 {
        return Err(Error::DegenerateTransition);
    }
    let d = p.mean.len() as f64;
    let sq: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if p.std == q.std {
        // Same-std form, kept separate so KL(p, p) is exactly 0.
        return Ok(sq / (2.0 * q.std * q.std));
    }
    Ok(d * (q.std / p.std).ln() + (d * p.std * p.std + sq) / (2.0 * q.std * q.std) - 0.5 * d)
}

/// Which stochastic stepper generates trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepperKind {
    Em,
    Ddim,
}

/// The transition mean as an affine function of the velocity output:
/// `mean = a + b * v`, with a scalar `b` shared across dimensions.
///
/// This is what lets objective gradients backpropagate through the mean
/// without re-deriving the stepper algebra; consistency with
/// [`em_transition`] / [`ddim_transition`] is covered by tests.
pub fn transition_affine(
    stepper: StepperKind,
    x: &[f64],
    t: f64,
    dt: f64,
    sigma_t: f64,
) -> Result<(Vec<f64>, f64)> {
    match stepper {
        StepperKind::Em => {
            if t == 0.0 {
                return Err(Error::ZeroTime);
            }
            let shrink = sigma_t * sigma_t * dt / (2.0 * t);
            let a = x.iter().map(|xi| xi * (1.0 + shrink)).collect();
            let b = -dt * (1.0 - sigma_t * sigma_t * (1.0 - t) / (2.0 * t));
            Ok((a, b))
        }
        StepperKind::Ddim => {
            let s = t - dt;
            if sigma_t > s {
                return Err(Error::ScheduleInfeasible {
                    t,
                    dt,
                    sigma: sigma_t,
                    limit: s,
                });
            }
            let noise_coeff = (s * s - sigma_t * sigma_t).sqrt();
            let a = x.iter().map(|xi| xi * (1.0 - s + noise_coeff)).collect();
            let b = -t * (1.0 - s) + (1.0 - t) * noise_coeff;
            Ok((a, b))
        }
    }
}

/// Transition std under a stepper for the schedule value `sigma_t`.
pub fn transition_std(stepper: StepperKind, dt: f64, sigma_t: f64) -> f64 {
    match stepper {
        StepperKind::Em => sigma_t * dt.sqrt(),
        StepperKind::Ddim => sigma_t,
    }
}

/// One recorded rollout transition.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Start time of the transition.
    pub t: f64,
    pub dt: f64,
    /// Schedule value sigma_t (std before the stepper-specific scaling).
    pub sigma: f64,
    pub law: GaussianTransition,
    /// The standard-normal draw realizing the step.
    pub noise: Vec<f64>,
    /// Log-density of the realized step under the sampling policy;
    /// `None` for deterministic transitions (std = 0).
    pub log_prob: Option<f64>,
}

/// One denoising rollout. States run from `t = 1` (index 0) down to `t = 0`.
/// The reward fields stay empty until the trajectory is scored.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub context: usize,
    pub states: Vec<Vec<f64>>,
    pub transitions: Vec<Transition>,
    /// Clean-point estimates per state, filled by the reward pass.
    pub denoised: Vec<Vec<f64>>,
    /// Stepwise rewards per state (t = 1 ... 0), filled by the reward pass.
    pub rewards: Vec<f64>,
    /// Per-transition gains, filled by the reward pass.
    pub gains: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    /// Reward of the final sample, available once scored.
    pub fn final_reward(&self) -> f64 {
        *self.rewards.last().expect("trajectory is scored")
    }

    /// Max replay residual `|x_next - (mean + std * eps)|` over transitions.
    pub fn replay_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (k, tr) in self.transitions.iter().enumerate() {
            for (d, x) in self.states[k + 1].iter().enumerate() {
                let replayed = tr.law.mean[d] + tr.law.std * tr.noise[d];
                worst = worst.max((x - replayed).abs());
            }
        }
        worst
    }
}

/// N trajectories sharing one initial noise and context.
#[derive(Debug, Clone)]
pub struct Group {
    pub initial_noise: Vec<f64>,
    pub context: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn final_rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.final_reward()).collect()
    }
}

/// Generates one trajectory. The noise for transition `k` comes from
/// `key.child(k)`, so the stream layout matches the documented derivation
/// scheme and rollouts are reproducible transition by transition.
pub fn rollout(
    config: &NetConfig,
    params: &ParamVector,
    initial_noise: &[f64],
    context: usize,
    grid: &TimeGrid,
    stepper: StepperKind,
    schedule: &NoiseSchedule,
    key: &StreamKey,
) -> Result<Trajectory> {
    let steps = grid.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut transitions = Vec::with_capacity(steps);
    states.push(initial_noise.to_vec());

    for k in 0..steps {
        let t = grid.times()[k];
        let dt = grid.dt(k);
        let sigma_t = sigma(schedule, t, dt);
        let x = &states[k];
        let v = forward(config, params, x, t, context)?;
        let law = match stepper {
            StepperKind::Em => em_transition(x, t, dt, &v, sigma_t)?,
            StepperKind::Ddim => {
                let clean = predict_clean(x, t, &v);
                let noise = predict_noise(x, t, &v);
                ddim_transition(&clean, &noise, t, dt, sigma_t)?
            }
        };
        let eps = key.child(k as u64).rng().normal_vec(x.len());
        let next = apply_noise(&law, &eps);
        let log_prob = if law.std > 0.0 {
            Some(gaussian_logprob(&next, &law)?)
        } else {
            None
        };
        states.push(next);
        transitions.push(Transition {
            t,
            dt,
            sigma: sigma_t,
            law,
            noise: eps,
            log_prob,
        });
    }

    Ok(Trajectory {
        context,
        states,
        transitions,
        denoised: Vec::new(),
        rewards: Vec::new(),
        gains: Vec::new(),
    })
}

/// Per-dimension KS comparison of final samples.
#[derive(Debug, Clone)]
pub struct DimReport {
    pub ks_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct MarginalReport {
    pub per_dim: Vec<DimReport>,
    /// Max absolute per-dimension mean difference.
    pub mean_gap: f64,
    /// Max absolute covariance-entry difference.
    pub cov_gap: f64,
    pub samples: usize,
}

impl MarginalReport {
    pub fn min_p_value(&self) -> f64 {
        self.per_dim.iter().map(|d| d.p_value).fold(f64::INFINITY, f64::min)
    }
}

/// Samples `n` final points with the deterministic ODE and `n` with the
/// stochastic stepper on the same fine grid, then compares the marginals.
///
/// Sample `i` derives its initial noise from `key.child(i).child(0)` and its
/// step noise from `key.child(i).child(1).child(k)`; with the zero schedule
/// and the EM stepper the two sample sets coincide exactly.
pub fn marginal_match_test(
    config: &NetConfig,
    params: &ParamVector,
    stepper: StepperKind,
    schedule: &NoiseSchedule,
    n: usize,
    grid_steps: usize,
    context: usize,
    key: &StreamKey,
) -> Result<MarginalReport> {
    assert!(n >= 1000, "marginal matching needs n >= 1000 samples");
    let grid = TimeGrid::uniform(grid_steps)?;
    let dim = config.data_dim;

    let pairs: Vec<(Vec<f64>, Vec<f64>)> = exec::map_indexed(n, |i| {
        let sample_key = key.child(i as u64);
        let x_init = sample_key.child(0).rng().normal_vec(dim);

        let mut state = FlowState {
            x: x_init.clone(),
            t: 1.0,
        };
        for k in 0..grid_steps {
            let dt = grid.dt(k);
            state = ode_step(config, params, &state, dt, context)?;
            state.t = grid.times()[k + 1];
        }
        let ode_final = state.x;

        let noise_key = sample_key.child(1);
        let mut x = x_init;
        for k in 0..grid_steps {
            let t = grid.times()[k];
            let dt = grid.dt(k);
            let sigma_t = sigma(schedule, t, dt);
            let v = forward(config, params, &x, t, context)?;
            let eps = noise_key.child(k as u64).rng().normal_vec(dim);
            x = match stepper {
                StepperKind::Em => em_step(&x, t, dt, &v, sigma_t, &eps)?,
                StepperKind::Ddim => {
                    let clean = predict_clean(&x, t, &v);
                    let noise = predict_noise(&x, t, &v);
                    ddim_step(&clean, &noise, t, dt, sigma_t, &eps)?
                }
            };
        }
        Ok((ode_final, x))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let ode: Vec<Vec<f64>> = pairs.iter().map(|(a, _)| a.clone()).collect();
    let sde: Vec<Vec<f64>> = pairs.iter().map(|(_, b)| b.clone()).collect();

    let per_dim = (0..dim)
        .map(|d| {
            let xs: Vec<f64> = ode.iter().map(|s| s[d]).collect();
            let ys: Vec<f64> = sde.iter().map(|s| s[d]).collect();
            let (ks_stat, p_value) = stats::ks_two_sample(&xs, &ys);
            DimReport { ks_stat, p_value }
        })
        .collect();

    let mean_a = stats::mean_vector(&ode);
    let mean_b = stats::mean_vector(&sde);
    let mean_gap = mean_a
        .iter()
        .zip(&mean_b)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cov_a = stats::covariance(&ode);
    let cov_b = stats::covariance(&sde);
    let cov_gap = cov_a
        .iter()
        .flatten()
        .zip(cov_b.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    Ok(MarginalReport {
        per_dim,
        mean_gap,
        cov_gap,
        samples: n,
    })
}
