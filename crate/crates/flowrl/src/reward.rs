//! Toy reward functions and stepwise reward evaluation.
//!
//! Rewards score clean points per context. Trajectories are scored statewise:
//! each recorded state is denoised to a clean estimate with a deterministic
//! multi-substep ODE pass, the estimate is rewarded, and successive reward
//! differences become per-transition gains.

use crate::error::{Error, Result};
use crate::exec;
use crate::flow::multistep_denoise;
use crate::net::{NetConfig, ParamVector};
use crate::sde::Trajectory;
use crate::task::GaussianMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// `exp(-||x - target||^2 / bandwidth^2)`, in (0, 1].
    ModeProximity,
    /// Log-density under a per-context target mixture (unbounded).
    MixtureLogDensity,
    /// 1 inside the target quadrant, else 0.
    QuadrantIndicator,
}

/// Per-context reward parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTarget {
    /// Target point for proximity; its sign pattern defines the quadrant.
    pub center: Vec<f64>,
    /// Target mixture for the log-density kind.
    pub mixture: Option<Vec<GaussianMode>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub bandwidth: f64,
    /// Indexed by context id.
    pub targets: Vec<RewardTarget>,
}

impl RewardSpec {
    /// Proximity reward with one target center per context.
    pub fn mode_proximity(centers: Vec<Vec<f64>>, bandwidth: f64) -> Self {
        Self {
            kind: RewardKind::ModeProximity,
            bandwidth,
            targets: centers
                .into_iter()
                .map(|center| RewardTarget {
                    center,
                    mixture: None,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth <= 0.0 {
            return Err(Error::Config("reward bandwidth must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("reward needs a target per context".into()));
        }
        if self.kind == RewardKind::MixtureLogDensity
            && self.targets.iter().any(|t| t.mixture.is_none())
        {
            return Err(Error::Config(
                "mixture-logdensity reward needs a mixture per context".into(),
            ));
        }
        Ok(())
    }

    /// Whether the kind maps into [0, 1].
    pub fn bounded(&self) -> bool {
        matches!(
            self.kind,
            RewardKind::ModeProximity | RewardKind::QuadrantIndicator
        )
    }
}

/// Scores one clean point for a context.
pub fn reward(spec: &RewardSpec, x: &[f64], context: usize) -> Result<f64> {
    let target = spec.targets.get(context).ok_or(Error::UnknownContext {
        context,
        available: spec.targets.len(),
    })?;
    match spec.kind {
        RewardKind::ModeProximity => {
            let sq: f64 = x
                .iter()
                .zip(&target.center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok((-sq / (spec.bandwidth * spec.bandwidth)).exp())
        }
        RewardKind::MixtureLogDensity => {
            let mixture = target.mixture.as_ref().expect("validated");
            let total: f64 = mixture.iter().map(|m| m.weight).sum();
            let dim = x.len() as f64;
            let mut acc = f64::NEG_INFINITY;
            for mode in mixture {
                if mode.weight == 0.0 {
                    continue;
                }
                let sq: f64 = x
                    .iter()
                    .zip(&mode.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let logp = (mode.weight / total).ln()
                    - 0.5 * dim * std::f64::consts::TAU.ln()
                    - dim * mode.std.ln()
                    - sq / (2.0 * mode.std * mode.std);
                if logp > acc {
                    acc = logp + (acc - logp).exp().ln_1p();
                } else {
                    acc += (logp - acc).exp().ln_1p();
                }
            }
            Ok(acc)
        }
        RewardKind::QuadrantIndicator => {
            let inside = x
                .iter()
                .zip(&target.center)
                .all(|(xi, ci)| xi * ci.signum() > 0.0);
            Ok(if inside { 1.0 } else { 0.0 })
        }
    }
}

/// Stepwise rewards of one trajectory, one per recorded state (t = 1 ... 0).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRewards {
    pub values: Vec<f64>,
    /// The clean estimates the rewards were computed on.
    pub denoised: Vec<Vec<f64>>,
}

/// Scores every state of a trajectory: denoise with `substeps` deterministic
/// ODE substeps, then reward the estimate. The state at `t = 0` is its own
/// estimate, so the last entry is exactly the final-sample reward. States are
/// scored independently (and in parallel).
pub fn stepwise_rewards(
    config: &NetConfig,
    params: &ParamVector,
    traj: &Trajectory,
    substeps: usize,
    spec: &RewardSpec,
) -> Result<StepRewards> {
    assert!(substeps >= 1, "stepwise rewards need substeps >= 1");
    let times: Vec<f64> = traj
        .transitions
        .iter()
        .map(|tr| tr.t)
        .chain(std::iter::once(0.0))
        .collect();
    let scored: Vec<(Vec<f64>, f64)> = exec::map_indexed(traj.states.len(), |k| {
        let estimate =
            multistep_denoise(config, params, &traj.states[k], times[k], substeps, traj.context)?;
        let r = reward(spec, &estimate, traj.context)?;
        Ok((estimate, r))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut denoised = Vec::with_capacity(scored.len());
    let mut values = Vec::with_capacity(scored.len());
    for (estimate, r) in scored {
        denoised.push(estimate);
        values.push(r);
    }
    Ok(StepRewards { values, denoised })
}

/// Attaches stepwise rewards and gains to a trajectory.
pub fn score_trajectory(
    config: &NetConfig,
    params: &ParamVector,
    traj: &mut Trajectory,
    substeps: usize,
    spec: &RewardSpec,
) -> Result<()> {
    let scored = stepwise_rewards(config, params, traj, substeps, spec)?;
    traj.gains = scored
        .values
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect();
    traj.rewards = scored.values;
    traj.denoised = scored.denoised;
    Ok(())
}
