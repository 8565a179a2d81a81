//! Behavior on trained nets: Tweedie estimate quality, stepwise reward
//! curves, and trainer smoke runs for every advantage method.

use flowrl::credit::AdvantageMethod;
use flowrl::flow::{interpolate, multistep_denoise, TimeGrid};
use flowrl::grpo::{rollout_group, TrainConfig, Trainer};
use flowrl::net::{NetConfig, ParamVector};
use flowrl::pretrain::{init_params, pretrain, PretrainConfig};
use flowrl::reward::RewardSpec;
use flowrl::rng::StreamKey;
use flowrl::sde::{NoiseSchedule, StepperKind};
use flowrl::task::{ContextSpec, GaussianMode, ToyTask};
use std::sync::LazyLock;

fn proximity_spec(task: &ToyTask) -> RewardSpec {
    RewardSpec::mode_proximity(
        task.contexts
            .iter()
            .map(|c| task.modes[c.reward_target].mean.clone())
            .collect(),
        0.5,
    )
}

/// Pretrained four-mode reference, shared across tests in this binary.
static FOUR_MODE: LazyLock<(NetConfig, ParamVector, ToyTask)> = LazyLock::new(|| {
    let task = ToyTask::four_mode_default();
    let net = NetConfig::new(2, 4, vec![64, 64]);
    let cfg = PretrainConfig {
        iterations: 4000,
        batch_size: 128,
        holdout_size: 1024,
        holdout_threshold: 2.6,
        log_every: 500,
        ..PretrainConfig::default()
    };
    let result = pretrain(&net, init_params(&net, 7), &task, &cfg, 7).expect("pretrain fixture");
    eprintln!("four-mode fixture holdout loss: {}", result.final_holdout_loss);
    (net, result.params, task)
});

#[test]
fn single_gaussian_tweedie_estimate_hits_the_mode() {
    // One tight mode at the origin; posterior std at t = 0.5 is closed-form.
    let mode_std = 0.15f64;
    let task = ToyTask {
        modes: vec![GaussianMode {
            mean: vec![0.0, 0.0],
            std: mode_std,
            weight: 1.0,
        }],
        contexts: vec![ContextSpec {
            pretrain_weights: vec![1.0],
            reward_target: 0,
        }],
    };
    let net = NetConfig::new(2, 1, vec![64, 64]);
    let cfg = PretrainConfig {
        iterations: 3000,
        batch_size: 128,
        holdout_size: 512,
        holdout_threshold: 1.0,
        log_every: 500,
        ..PretrainConfig::default()
    };
    let trained = pretrain(&net, init_params(&net, 11), &task, &cfg, 11).unwrap().params;

    let t = 0.5;
    // Var(x0 | x_t) per dim for Gaussian data and noise.
    let s2 = mode_std * mode_std;
    let var_xt = (1.0 - t) * (1.0 - t) * s2 + t * t;
    let posterior_var = s2 - ((1.0 - t) * s2) * ((1.0 - t) * s2) / var_xt;
    let posterior_std_norm = (2.0 * posterior_var).sqrt();

    let mut rng = StreamKey::new(12).rng();
    let n = 1000;
    let mut mean_dist = 0.0;
    for _ in 0..n {
        let x0 = task.sample_data(0, &mut rng).unwrap();
        let x1 = rng.normal_vec(2);
        let xt = interpolate(&x0, &x1, t);
        let estimate = multistep_denoise(&net, &trained, &xt, t, 5, 0).unwrap();
        let dist = estimate.iter().map(|e| e * e).sum::<f64>().sqrt();
        mean_dist += dist / n as f64;
    }
    assert!(
        mean_dist <= 3.0 * posterior_std_norm,
        "mean distance {mean_dist} vs 3 posterior std {}",
        3.0 * posterior_std_norm
    );
}

fn scored_groups(n_groups: usize) -> Vec<flowrl::sde::Group> {
    let (net, params, task) = &*FOUR_MODE;
    let spec = proximity_spec(task);
    let grid = TimeGrid::uniform(10).unwrap();
    (0..n_groups)
        .map(|g| {
            rollout_group(
                net,
                params,
                g % task.num_contexts(),
                &grid,
                StepperKind::Em,
                &NoiseSchedule::Flowgrpo { a: 0.7 },
                5,
                &spec,
                10,
                &StreamKey::new(100 + g as u64).child(0),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn stepwise_reward_curve_flattens_near_the_end() {
    // Mean reward curve over 100 trajectories: non-constant across t, and
    // within 0.05 of the final reward by t = 0.2 (state index 8 of 10).
    let groups = scored_groups(10);
    let states = 11;
    let mut curve = vec![0.0; states];
    let mut count = 0.0;
    for group in &groups {
        for traj in &group.trajectories {
            for (c, r) in curve.iter_mut().zip(&traj.rewards) {
                *c += r;
            }
            count += 1.0;
        }
    }
    for c in &mut curve {
        *c /= count;
    }
    let spread = curve.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - curve.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    assert!(spread > 0.02, "curve unexpectedly flat: {curve:?}");
    let final_reward = curve[10];
    assert!(
        (curve[8] - final_reward).abs() <= 0.05,
        "t=0.2 reward {} vs final {final_reward}",
        curve[8]
    );
}

#[test]
fn substep_estimates_converge_toward_time_zero() {
    // Median gap between the 1-substep and 5-substep estimates, in coarse
    // t-bins, must not increase as t heads to 0 (and is exactly 0 at t = 0).
    let (net, params, _) = &*FOUR_MODE;
    let groups = scored_groups(10);
    let times: Vec<f64> = (0..=10).map(|k| (10 - k) as f64 / 10.0).collect();
    let mut per_state: Vec<Vec<f64>> = vec![Vec::new(); 11];
    for group in &groups {
        for traj in &group.trajectories {
            for (k, state) in traj.states.iter().enumerate() {
                let one = multistep_denoise(net, params, state, times[k], 1, traj.context).unwrap();
                let five = multistep_denoise(net, params, state, times[k], 5, traj.context).unwrap();
                let gap = one
                    .iter()
                    .zip(&five)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                per_state[k].push(gap);
            }
        }
    }
    let median = |xs: &mut Vec<f64>| -> f64 {
        xs.sort_by(|a, b| a.total_cmp(b));
        xs[xs.len() / 2]
    };
    // Bins of state indices running from t = 1 toward t = 0.
    let bins = [vec![0usize, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9, 10]];
    let mut medians = Vec::new();
    for bin in &bins {
        let mut pooled: Vec<f64> = bin.iter().flat_map(|&k| per_state[k].clone()).collect();
        medians.push(median(&mut pooled));
    }
    for w in medians.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "bin medians not decreasing: {medians:?}");
    }
    assert!(*medians.last().unwrap() < medians[0], "no overall contraction");
    // Exact agreement at t = 0.
    assert!(per_state[10].iter().all(|g| *g == 0.0));
}

#[test]
fn trainer_smoke_for_every_method() {
    let (net, params, task) = &*FOUR_MODE;
    let spec = proximity_spec(task);
    for method in [
        AdvantageMethod::Uniform,
        AdvantageMethod::StepwiseJoint,
        AdvantageMethod::StepwisePerstep,
        AdvantageMethod::StepwiseEma,
        AdvantageMethod::StepwiseGae,
        AdvantageMethod::Pdistill,
    ] {
        let cfg = TrainConfig {
            group_size: 6,
            steps: 8,
            substeps: 3,
            method,
            iterations: 3,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(
            net.clone(),
            task.clone(),
            spec.clone(),
            cfg,
            params.clone(),
            90,
        )
        .unwrap();
        let metrics = trainer.run().unwrap();
        assert_eq!(metrics.len(), 3, "{method:?}");
        for m in &metrics {
            assert!(m.objective.is_finite(), "{method:?}");
            assert!(m.mean_final_reward.is_finite(), "{method:?}");
            assert!((0.0..=1.0).contains(&m.clip_fraction), "{method:?}");
        }
    }
}

#[test]
fn ddim_stepper_trains_and_differs_from_em() {
    let (net, params, task) = &*FOUR_MODE;
    let spec = proximity_spec(task);
    let cfg = TrainConfig {
        group_size: 6,
        steps: 8,
        substeps: 3,
        stepper: StepperKind::Ddim,
        schedule: NoiseSchedule::Ddim { eta: 0.9 },
        iterations: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(
        net.clone(),
        task.clone(),
        spec.clone(),
        cfg,
        params.clone(),
        91,
    )
    .unwrap();
    let metrics = trainer.run().unwrap();
    assert!(metrics.iter().all(|m| m.objective.is_finite()));
}
