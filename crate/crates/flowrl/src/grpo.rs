//! Policy optimization: clipped-ratio surrogate with a KL anchor, assembled
//! for every credit-assignment method, plus group rollouts and the training
//! iteration.
//!
//! The objective maximized is
//!
//! ```text
//! J = (1 / G N T) sum_{g,i,t} [ min(rho A, clip(rho, 1-e, 1+e) A) - beta KL ]
//! ```
//!
//! where `rho` is the density ratio of the stored transition under the
//! current vs. sampling policy and `KL` anchors each transition law to the
//! frozen reference. Transitions recorded with `std = 0` carry no density and
//! are excluded from the sums (they contribute zero terms); the `1/(G N T)`
//! normalization is kept regardless.
//!
//! Gradients flow through the transition mean only, which is affine in the
//! velocity output (see [`crate::sde::transition_affine`]); the surrogate's
//! min/clip differentiate as piecewise-constant-slope.

use crate::credit::{
    ema_center, gains, joint_normalize, perstep_normalize, uniform_advantage, AdvantageMatrix,
    AdvantageMethod, EmaState, GaeConfig,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::flow::TimeGrid;
use crate::net::{
    forward, grad_params, loss_value, EvalPoint, NetConfig, NetLoss, ParamVector,
};
use crate::optim::{adamw_step, AdamWConfig, OptState};
use crate::reward::{score_trajectory, RewardSpec};
use crate::rng::{purpose, StreamKey};
use crate::flow::{predict_clean, predict_noise};
use crate::sde::{
    ddim_transition, em_transition, gaussian_kl, gaussian_logprob, rollout, transition_affine,
    GaussianTransition, Group, NoiseSchedule, StepperKind, Trajectory,
};
use crate::task::ToyTask;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Current, sampling-snapshot, and frozen reference parameters.
#[derive(Debug, Clone)]
pub struct PolicyTriple {
    pub current: ParamVector,
    pub old: ParamVector,
    pub reference: ParamVector,
}

impl PolicyTriple {
    pub fn from_reference(reference: ParamVector) -> Self {
        Self {
            current: reference.clone(),
            old: reference.clone(),
            reference,
        }
    }

    pub fn is_on_policy(&self) -> bool {
        self.current.values == self.old.values
    }
}

/// Exponent clamp for density ratios; larger log-ratio gaps saturate (with a
/// counter) instead of overflowing.
pub const RATIO_EXPONENT_CLAMP: f64 = 30.0;

/// Density ratio `exp(logp_new - logp_old)` with a clamped exponent.
/// The flag reports whether the clamp fired.
pub fn ratio(logp_new: f64, logp_old: f64) -> (f64, bool) {
    let diff = logp_new - logp_old;
    let clamped = diff.abs() > RATIO_EXPONENT_CLAMP;
    (diff.clamp(-RATIO_EXPONENT_CLAMP, RATIO_EXPONENT_CLAMP).exp(), clamped)
}

/// PPO-style pessimistic surrogate `min(rho A, clip(rho) A)`.
pub fn clipped_term(rho: f64, advantage: f64, clip_range: f64) -> f64 {
    let clipped = rho.clamp(1.0 - clip_range, 1.0 + clip_range);
    (rho * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Trajectories per group (N).
    pub group_size: usize,
    /// Denoising steps per trajectory (T).
    pub steps: usize,
    /// ODE substeps per stepwise reward estimate (T').
    pub substeps: usize,
    /// KL anchor weight (beta).
    pub kl_weight: f64,
    /// Ratio clip radius (epsilon).
    pub clip_range: f64,
    pub stepper: StepperKind,
    pub schedule: NoiseSchedule,
    pub method: AdvantageMethod,
    /// Gradient steps per rollout; 1 keeps training on-policy.
    pub inner_epochs: usize,
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    pub gae: GaeConfig,
    /// Decay for the stepwise-ema baseline.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            steps: 10,
            substeps: 5,
            kl_weight: 1e-3,
            clip_range: 0.2,
            stepper: StepperKind::Em,
            schedule: NoiseSchedule::Flowgrpo { a: 0.7 },
            method: AdvantageMethod::StepwiseJoint,
            inner_epochs: 1,
            iterations: 200,
            optimizer: AdamWConfig::default(),
            gae: GaeConfig::default(),
            ema_decay: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("train.group_size must be >= 2".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config("train.steps must be >= 2".into()));
        }
        if self.method == AdvantageMethod::Pdistill && self.steps < 3 {
            return Err(Error::Config("pdistill needs train.steps >= 3".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("train.substeps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.clip_range) {
            return Err(Error::Config("train.clip_range must lie in [0, 1]".into()));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::Config("train.kl_weight must be >= 0".into()));
        }
        if self.inner_epochs == 0 {
            return Err(Error::Config("train.inner_epochs must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be >= 1".into()));
        }
        if !(0.0 < self.ema_decay && self.ema_decay <= 1.0) {
            return Err(Error::Config("train.ema_decay must lie in (0, 1]".into()));
        }
        if self.schedule == NoiseSchedule::Zero && self.method != AdvantageMethod::Pdistill {
            return Err(Error::Config(
                "zero schedule provides no stochasticity for ratio-based training".into(),
            ));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.gae.validate()
    }
}

struct TransitionTerm {
    point: usize,
    x_next: Vec<f64>,
    affine_a: Vec<f64>,
    affine_b: f64,
    std: f64,
    logp_old: f64,
    advantage: f64,
    mu_ref: Vec<f64>,
    weight: f64,
}

struct TermEval {
    surrogate: f64,
    kl: f64,
    rho: f64,
    clamped: bool,
    /// d surrogate / d rho on the active min branch.
    surrogate_slope: f64,
}

/// The Eq.-style GRPO objective as a [`NetLoss`] over the stored states.
pub struct GrpoLoss {
    points: Vec<EvalPoint>,
    terms: Vec<TransitionTerm>,
    beta: f64,
    clip_range: f64,
}

impl GrpoLoss {
    /// Builds the loss for a set of scored groups with matching advantage
    /// matrices. Reference transition means are precomputed here.
    pub fn build(
        net: &NetConfig,
        reference: &ParamVector,
        groups: &[Group],
        advantages: &[AdvantageMatrix],
        stepper: StepperKind,
        beta: f64,
        clip_range: f64,
    ) -> Result<Self> {
        if groups.len() != advantages.len() {
            return Err(Error::LengthMismatch {
                what: "advantage matrices",
                expected: groups.len(),
                got: advantages.len(),
            });
        }
        let mut points = Vec::new();
        let mut terms = Vec::new();
        for (group, adv) in groups.iter().zip(advantages) {
            let n = group.trajectories.len();
            let steps = group.trajectories.first().map_or(0, |t| t.steps());
            if adv.matrix.rows() != n || adv.matrix.cols() != steps {
                return Err(Error::LengthMismatch {
                    what: "advantage matrix shape",
                    expected: n * steps,
                    got: adv.matrix.rows() * adv.matrix.cols(),
                });
            }
            let weight = 1.0 / (groups.len() * n * steps) as f64;
            for (i, traj) in group.trajectories.iter().enumerate() {
                for (k, tr) in traj.transitions.iter().enumerate() {
                    if tr.law.std == 0.0 {
                        continue;
                    }
                    let (affine_a, affine_b) =
                        transition_affine(stepper, &traj.states[k], tr.t, tr.dt, tr.sigma)?;
                    let point = points.len();
                    points.push(EvalPoint {
                        x: traj.states[k].clone(),
                        t: tr.t,
                        context: traj.context,
                    });
                    terms.push(TransitionTerm {
                        point,
                        x_next: traj.states[k + 1].clone(),
                        affine_a,
                        affine_b,
                        std: tr.law.std,
                        logp_old: tr.log_prob.expect("stochastic transition has log-prob"),
                        advantage: adv.get(i, k),
                        mu_ref: Vec::new(),
                        weight,
                    });
                }
            }
        }

        // Reference means, evaluated once per term at the stored states.
        let ref_outputs: Vec<Vec<f64>> = exec::map_indexed(points.len(), |p| {
            forward(net, reference, &points[p].x, points[p].t, points[p].context)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        for term in &mut terms {
            let v_ref = &ref_outputs[term.point];
            term.mu_ref = term
                .affine_a
                .iter()
                .zip(v_ref)
                .map(|(a, v)| a + term.affine_b * v)
                .collect();
        }

        Ok(Self {
            points,
            terms,
            beta,
            clip_range,
        })
    }

    fn term_eval(&self, term: &TransitionTerm, v: &[f64]) -> (TermEval, Vec<f64>) {
        let mu: Vec<f64> = term
            .affine_a
            .iter()
            .zip(v)
            .map(|(a, vi)| a + term.affine_b * vi)
            .collect();
        let law = GaussianTransition {
            mean: mu.clone(),
            std: term.std,
        };
        let logp_new = gaussian_logprob(&term.x_next, &law).expect("std > 0");
        let (rho, clamped) = ratio(logp_new, term.logp_old);
        let unclipped = rho * term.advantage;
        let clipped = rho.clamp(1.0 - self.clip_range, 1.0 + self.clip_range) * term.advantage;
        let (surrogate, surrogate_slope) = if unclipped <= clipped {
            (unclipped, term.advantage)
        } else {
            // Active branch is the clipped one, and rho sits outside the
            // clip interval there, so the slope is zero.
            (clipped, 0.0)
        };
        let kl: f64 = mu
            .iter()
            .zip(&term.mu_ref)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (2.0 * term.std * term.std);
        (
            TermEval {
                surrogate,
                kl,
                rho,
                clamped,
                surrogate_slope,
            },
            mu,
        )
    }

    /// Ratio/KL statistics of an already-computed forward pass.
    pub fn stats(&self, outputs: &[Vec<f64>]) -> ObjectiveStats {
        let mut clipped = 0usize;
        let mut clamps = 0usize;
        let mut kl_sum = 0.0;
        for term in &self.terms {
            let (eval, _) = self.term_eval(term, &outputs[term.point]);
            if eval.rho < 1.0 - self.clip_range || eval.rho > 1.0 + self.clip_range {
                clipped += 1;
            }
            if eval.clamped {
                clamps += 1;
            }
            kl_sum += eval.kl;
        }
        let denom = self.terms.len().max(1) as f64;
        ObjectiveStats {
            clip_fraction: clipped as f64 / denom,
            mean_kl: kl_sum / denom,
            ratio_clamps: clamps,
            terms: self.terms.len(),
        }
    }
}

impl NetLoss for GrpoLoss {
    fn eval_points(&self) -> &[EvalPoint] {
        &self.points
    }

    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let mut value = 0.0;
        let mut cots: Vec<Vec<f64>> = outputs.iter().map(|v| vec![0.0; v.len()]).collect();
        for term in &self.terms {
            let v = &outputs[term.point];
            let (eval, mu) = self.term_eval(term, v);
            value += term.weight * (eval.surrogate - self.beta * eval.kl);

            let rho_slope = if eval.clamped { 0.0 } else { eval.rho };
            let inv_var = 1.0 / (term.std * term.std);
            let cot = &mut cots[term.point];
            for d in 0..v.len() {
                let dlogp_dmu = (term.x_next[d] - mu[d]) * inv_var;
                let dkl_dmu = (mu[d] - term.mu_ref[d]) * inv_var;
                let dterm_dmu = eval.surrogate_slope * rho_slope * dlogp_dmu - self.beta * dkl_dmu;
                cot[d] += term.weight * dterm_dmu * term.affine_b;
            }
        }
        (value, cots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveStats {
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub ratio_clamps: usize,
    pub terms: usize,
}

pub struct ObjectiveEval {
    pub value: f64,
    /// Gradient of J with respect to the current parameters (ascent
    /// direction).
    pub grad: ParamVector,
    pub stats: ObjectiveStats,
}

/// Value and gradient of the GRPO objective for the current policy.
pub fn objective(
    net: &NetConfig,
    triple: &PolicyTriple,
    groups: &[Group],
    advantages: &[AdvantageMatrix],
    stepper: StepperKind,
    beta: f64,
    clip_range: f64,
) -> Result<ObjectiveEval> {
    let loss = GrpoLoss::build(net, &triple.reference, groups, advantages, stepper, beta, clip_range)?;
    let out = grad_params(net, &triple.current, &loss)?;
    let stats = loss.stats(&out.outputs);
    Ok(ObjectiveEval {
        value: out.value,
        grad: out.grad,
        stats,
    })
}

/// The on-policy reduction: with `current == old` the surrogate collapses to
/// raw gains, so the objective is `(1 / G N T) sum (g - beta KL)`.
///
/// Deliberately computed through the transition-law route
/// ([`em_transition`] / [`ddim_transition`] plus [`gaussian_kl`]) rather
/// than the affine route used by [`objective`], so the two can cross-check
/// each other.
pub fn on_policy_objective(
    net: &NetConfig,
    triple: &PolicyTriple,
    groups: &[Group],
    stepper: StepperKind,
    beta: f64,
) -> Result<f64> {
    if !triple.is_on_policy() {
        return Err(Error::NotOnPolicy);
    }
    let mut value = 0.0;
    for group in groups {
        let n = group.trajectories.len();
        let steps = group.trajectories.first().map_or(0, |t| t.steps());
        let weight = 1.0 / (groups.len() * n * steps) as f64;
        for traj in &group.trajectories {
            for (k, tr) in traj.transitions.iter().enumerate() {
                if tr.law.std == 0.0 {
                    continue;
                }
                let x = &traj.states[k];
                let v_cur = forward(net, &triple.current, x, tr.t, traj.context)?;
                let v_ref = forward(net, &triple.reference, x, tr.t, traj.context)?;
                let law_cur = stepper_law(stepper, x, tr.t, tr.dt, &v_cur, tr.sigma)?;
                let law_ref = stepper_law(stepper, x, tr.t, tr.dt, &v_ref, tr.sigma)?;
                let kl = gaussian_kl(&law_cur, &law_ref)?;
                value += weight * (traj.gains[k] - beta * kl);
            }
        }
    }
    Ok(value)
}

fn stepper_law(
    stepper: StepperKind,
    x: &[f64],
    t: f64,
    dt: f64,
    v: &[f64],
    sigma: f64,
) -> Result<GaussianTransition> {
    match stepper {
        StepperKind::Em => em_transition(x, t, dt, v, sigma),
        StepperKind::Ddim => {
            let clean = predict_clean(x, t, v);
            let noise = predict_noise(x, t, v);
            ddim_transition(&clean, &noise, t, dt, sigma)
        }
    }
}

/// Mean transition KL of `params` against the reference over a set of
/// groups, for diagnostics.
pub fn mean_reference_kl(
    net: &NetConfig,
    params: &ParamVector,
    reference: &ParamVector,
    groups: &[Group],
    stepper: StepperKind,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for group in groups {
        for traj in &group.trajectories {
            for (k, tr) in traj.transitions.iter().enumerate() {
                if tr.law.std == 0.0 {
                    continue;
                }
                let x = &traj.states[k];
                let v_cur = forward(net, params, x, tr.t, traj.context)?;
                let v_ref = forward(net, reference, x, tr.t, traj.context)?;
                let law_cur = stepper_law(stepper, x, tr.t, tr.dt, &v_cur, tr.sigma)?;
                let law_ref = stepper_law(stepper, x, tr.t, tr.dt, &v_ref, tr.sigma)?;
                sum += gaussian_kl(&law_cur, &law_ref)?;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

struct PdTerm {
    point_hi: usize,
    point_lo: usize,
    x_hi: Vec<f64>,
    x_lo: Vec<f64>,
    t_hi: f64,
    t_lo: f64,
    advantage: f64,
    weight: f64,
}

/// Advantage-weighted progressive-distillation loss between the clean
/// estimate two steps ahead and the flow-transition mean, as a [`NetLoss`].
///
/// For each transition k with start time t and target time t2 = time[k + 2]:
/// `L_k = -|| x0_hat(t2) - mu ||^2` with
/// `mu = (1 - t2) x0_hat(t) + t2 x1_hat(t)`, scaled by the transition's
/// advantage and averaged over the valid terms. No ratios or KL terms enter.
pub struct PdistillLoss {
    points: Vec<EvalPoint>,
    terms: Vec<PdTerm>,
}

impl PdistillLoss {
    pub fn build(groups: &[Group], advantages: &[AdvantageMatrix]) -> Result<Self> {
        let mut points = Vec::new();
        let mut terms = Vec::new();
        for (group, adv) in groups.iter().zip(advantages) {
            let n = group.trajectories.len();
            for (i, traj) in group.trajectories.iter().enumerate() {
                let steps = traj.steps();
                if steps < 3 {
                    return Err(Error::TooFewSteps { steps });
                }
                let weight = 1.0 / (groups.len() * n * (steps - 1)) as f64;
                // One eval point per state; terms pair state k with k + 2.
                let base = points.len();
                let times: Vec<f64> = traj
                    .transitions
                    .iter()
                    .map(|tr| tr.t)
                    .chain(std::iter::once(0.0))
                    .collect();
                for (k, state) in traj.states.iter().enumerate() {
                    points.push(EvalPoint {
                        x: state.clone(),
                        t: times[k],
                        context: traj.context,
                    });
                }
                for k in 0..steps - 1 {
                    terms.push(PdTerm {
                        point_hi: base + k,
                        point_lo: base + k + 2,
                        x_hi: traj.states[k].clone(),
                        x_lo: traj.states[k + 2].clone(),
                        t_hi: times[k],
                        t_lo: times[k + 2],
                        advantage: adv.get(i, k),
                        weight,
                    });
                }
            }
        }
        Ok(Self { points, terms })
    }
}

impl NetLoss for PdistillLoss {
    fn eval_points(&self) -> &[EvalPoint] {
        &self.points
    }

    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let mut value = 0.0;
        let mut cots: Vec<Vec<f64>> = outputs.iter().map(|v| vec![0.0; v.len()]).collect();
        for term in &self.terms {
            let v_hi = &outputs[term.point_hi];
            let v_lo = &outputs[term.point_lo];
            let dim = v_hi.len();
            let s = term.t_lo;
            // mu = (1 - s) x0_hat(t_hi) + s x1_hat(t_hi), affine in v_hi.
            let mu_slope = -term.t_hi * (1.0 - s) + (1.0 - term.t_hi) * s;
            let mut sq = 0.0;
            let mut diffs = vec![0.0; dim];
            for d in 0..dim {
                let clean_hi = term.x_hi[d] - term.t_hi * v_hi[d];
                let noise_hi = term.x_hi[d] + (1.0 - term.t_hi) * v_hi[d];
                let mu = (1.0 - s) * clean_hi + s * noise_hi;
                let target = term.x_lo[d] - s * v_lo[d];
                let diff = target - mu;
                sq += diff * diff;
                diffs[d] = diff;
            }
            value += term.weight * term.advantage * (-sq);
            let scale = term.weight * term.advantage;
            for d in 0..dim {
                // d(-sq)/d target = -2 diff; d target / d v_lo = -s.
                cots[term.point_lo][d] += scale * 2.0 * diffs[d] * s;
                // d(-sq)/d mu = +2 diff; d mu / d v_hi = mu_slope.
                cots[term.point_hi][d] += scale * 2.0 * diffs[d] * mu_slope;
            }
        }
        (value, cots)
    }
}

/// Progressive-distillation loss of a single scored trajectory.
pub fn pdistill_loss(
    net: &NetConfig,
    params: &ParamVector,
    group: &Group,
    advantages: &AdvantageMatrix,
) -> Result<f64> {
    let loss = PdistillLoss::build(std::slice::from_ref(group), std::slice::from_ref(advantages))?;
    loss_value(net, params, &loss)
}

/// Rolls out one group: a shared initial noise, N trajectories with
/// per-trajectory noise streams, stepwise rewards, and gains.
///
/// The shared noise comes from `key.child(0)`, trajectory i's transitions
/// from `key.child(1).child(i).child(k)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    net: &NetConfig,
    params: &ParamVector,
    context: usize,
    grid: &TimeGrid,
    stepper: StepperKind,
    schedule: &NoiseSchedule,
    substeps: usize,
    reward_spec: &RewardSpec,
    group_size: usize,
    key: &StreamKey,
) -> Result<Group> {
    assert!(group_size >= 1, "group needs at least one trajectory");
    let initial_noise = key.child(0).rng().normal_vec(net.data_dim);
    let traj_key = key.child(1);
    let trajectories: Vec<Trajectory> = exec::map_indexed(group_size, |i| {
        let mut traj = rollout(
            net,
            params,
            &initial_noise,
            context,
            grid,
            stepper,
            schedule,
            &traj_key.child(i as u64),
        )?;
        score_trajectory(net, params, &mut traj, substeps, reward_spec)?;
        Ok(traj)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(Group {
        initial_noise,
        context,
        trajectories,
    })
}

/// Per-iteration training diagnostics.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub context: usize,
    pub mean_final_reward: f64,
    /// Mean stepwise reward per state (t = 1 ... 0).
    pub mean_reward_curve: Vec<f64>,
    /// Mean absolute gain per transition.
    pub mean_abs_gain: Vec<f64>,
    pub objective: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub ratio_clamps: usize,
    pub wall_ms: f64,
}

/// Advantage computation for one scored group under a configured method.
/// Threads the EMA baseline state when the method needs it.
pub fn compute_advantages(
    group: &Group,
    method: AdvantageMethod,
    gae_cfg: &GaeConfig,
    ema: &mut EmaState,
) -> Result<AdvantageMatrix> {
    let reward_rows: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| t.rewards.clone())
        .collect();
    let gain_matrix = gains(&reward_rows)?;
    Ok(match method {
        AdvantageMethod::Uniform => {
            uniform_advantage(&group.final_rewards(), gain_matrix.cols())
        }
        AdvantageMethod::StepwiseJoint => joint_normalize(&gain_matrix),
        AdvantageMethod::StepwisePerstep => perstep_normalize(&gain_matrix),
        AdvantageMethod::StepwiseEma => {
            let (centered, next) = ema_center(&gain_matrix, ema);
            *ema = next;
            joint_normalize(&centered)
        }
        AdvantageMethod::StepwiseGae => joint_normalize(&crate::credit::gae(&gain_matrix, gae_cfg)),
        // pdistill scales its distillation terms by gain-based advantages.
        AdvantageMethod::Pdistill => joint_normalize(&gain_matrix),
    })
}

/// The training loop driver: owns the policy triple, optimizer and baseline
/// state, and derives every random draw from (seed, iteration).
pub struct Trainer {
    net: NetConfig,
    task: ToyTask,
    reward_spec: RewardSpec,
    cfg: TrainConfig,
    grid: TimeGrid,
    pub triple: PolicyTriple,
    opt: OptState,
    ema: EmaState,
    seed: u64,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        net: NetConfig,
        task: ToyTask,
        reward_spec: RewardSpec,
        cfg: TrainConfig,
        reference: ParamVector,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        net.validate()?;
        task.validate()?;
        reward_spec.validate()?;
        if net.data_dim != task.dim() {
            return Err(Error::Config("net.data_dim must match the task dimension".into()));
        }
        if net.num_contexts != task.num_contexts() {
            return Err(Error::Config("net.num_contexts must match the task".into()));
        }
        reference.validate_finite().map_err(|_| {
            Error::Config("reference checkpoint contains non-finite parameters".into())
        })?;
        let grid = TimeGrid::uniform(cfg.steps)?;
        let opt = OptState::new(reference.len(), cfg.optimizer);
        let ema = EmaState::new(cfg.steps, cfg.ema_decay);
        Ok(Self {
            net,
            task,
            reward_spec,
            cfg,
            grid,
            triple: PolicyTriple::from_reference(reference),
            opt,
            ema,
            seed,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamVector {
        &self.triple.current
    }

    /// Context sampled at a given iteration; method-independent so paired
    /// comparisons consume identical streams.
    pub fn context_at(seed: u64, iteration: usize, num_contexts: usize) -> usize {
        StreamKey::new(seed)
            .child(purpose::CONTEXT)
            .child(iteration as u64)
            .rng()
            .below(num_contexts)
    }

    /// One Alg.-style iteration: snapshot, rollout group, advantages,
    /// `inner_epochs` ascent steps on the configured objective.
    pub fn step(&mut self) -> Result<IterationMetrics> {
        let start = Instant::now();
        let iteration = self.iteration;
        let context = Self::context_at(self.seed, iteration, self.task.num_contexts());

        self.triple.old = self.triple.current.clone();
        let rollout_key = StreamKey::new(self.seed)
            .child(purpose::ROLLOUT)
            .child(iteration as u64);
        let group = rollout_group(
            &self.net,
            &self.triple.old,
            context,
            &self.grid,
            self.cfg.stepper,
            &self.cfg.schedule,
            self.cfg.substeps,
            &self.reward_spec,
            self.cfg.group_size,
            &rollout_key,
        )?;
        let advantages = compute_advantages(&group, self.cfg.method, &self.cfg.gae, &mut self.ema)?;

        let groups = std::slice::from_ref(&group);
        let advs = std::slice::from_ref(&advantages);
        let mut first_value = 0.0;
        let mut first_stats: Option<ObjectiveStats> = None;
        for epoch in 0..self.cfg.inner_epochs {
            let (value, grad, stats) = if self.cfg.method == AdvantageMethod::Pdistill {
                let loss = PdistillLoss::build(groups, advs)?;
                let out = grad_params(&self.net, &self.triple.current, &loss)?;
                (out.value, out.grad, None)
            } else {
                let eval = objective(
                    &self.net,
                    &self.triple,
                    groups,
                    advs,
                    self.cfg.stepper,
                    self.cfg.kl_weight,
                    self.cfg.clip_range,
                )?;
                (eval.value, eval.grad, Some(eval.stats))
            };
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    loss: value,
                });
            }
            if epoch == 0 {
                first_value = value;
                first_stats = stats;
            }
            let descent: Vec<f64> = grad.values.iter().map(|g| -g).collect();
            adamw_step(&mut self.triple.current, &descent, &mut self.opt)?;
        }

        let metrics = self.collect_metrics(iteration, context, &group, first_value, first_stats, start)?;
        self.iteration += 1;
        Ok(metrics)
    }

    fn collect_metrics(
        &self,
        iteration: usize,
        context: usize,
        group: &Group,
        objective_value: f64,
        stats: Option<ObjectiveStats>,
        start: Instant,
    ) -> Result<IterationMetrics> {
        let n = group.trajectories.len() as f64;
        let states = self.cfg.steps + 1;
        let mut mean_reward_curve = vec![0.0; states];
        let mut mean_abs_gain = vec![0.0; self.cfg.steps];
        for traj in &group.trajectories {
            for (m, r) in mean_reward_curve.iter_mut().zip(&traj.rewards) {
                *m += r / n;
            }
            for (m, g) in mean_abs_gain.iter_mut().zip(&traj.gains) {
                *m += g.abs() / n;
            }
        }
        let mean_final_reward = group.final_rewards().iter().sum::<f64>() / n;
        let (mean_kl, clip_fraction, ratio_clamps) = match stats {
            Some(s) => (s.mean_kl, s.clip_fraction, s.ratio_clamps),
            None => {
                let kl = mean_reference_kl(
                    &self.net,
                    &self.triple.current,
                    &self.triple.reference,
                    std::slice::from_ref(group),
                    self.cfg.stepper,
                )?;
                (kl, 0.0, 0)
            }
        };
        Ok(IterationMetrics {
            iteration,
            context,
            mean_final_reward,
            mean_reward_curve,
            mean_abs_gain,
            objective: objective_value,
            mean_kl,
            clip_fraction,
            ratio_clamps,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs the configured number of iterations from the current state.
    pub fn run(&mut self) -> Result<Vec<IterationMetrics>> {
        (0..self.cfg.iterations).map(|_| self.step()).collect()
    }
}
