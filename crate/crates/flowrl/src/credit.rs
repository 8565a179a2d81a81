//! Credit assignment: turns stepwise rewards into per-transition advantages.
//!
//! Matrices are N trajectories by T transitions, ordered from the first
//! transition (leaving t = 1) to the last (arriving at t = 0). The gain of
//! transition k is the reward change it caused, `r[k+1] - r[k]` in state
//! order, so a trajectory's gains telescope to `r_final - r_initial`.

use crate::error::{Error, Result};
use crate::sde::Group;
use serde::{Deserialize, Serialize};

/// Guard below which a standard deviation counts as degenerate; a group with
/// no reward signal then yields zero advantages rather than amplified noise.
pub const DEGENERATE_STD: f64 = 1e-8;

/// N x T per-transition gains, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl GainMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || cols == 0 {
            return Err(Error::Config("gain matrix must be nonempty".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    what: "gain row",
                    expected: cols,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            values,
            rows: rows.len(),
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.cols + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// How an advantage matrix was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMethod {
    Uniform,
    StepwiseJoint,
    StepwisePerstep,
    StepwiseEma,
    StepwiseGae,
    Pdistill,
}

impl AdvantageMethod {
    pub fn name(self) -> &'static str {
        match self {
            AdvantageMethod::Uniform => "uniform",
            AdvantageMethod::StepwiseJoint => "stepwise-joint",
            AdvantageMethod::StepwisePerstep => "stepwise-perstep",
            AdvantageMethod::StepwiseEma => "stepwise-ema",
            AdvantageMethod::StepwiseGae => "stepwise-gae",
            AdvantageMethod::Pdistill => "pdistill",
        }
    }
}

impl std::str::FromStr for AdvantageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AdvantageMethod::Uniform),
            "stepwise-joint" => Ok(AdvantageMethod::StepwiseJoint),
            "stepwise-perstep" => Ok(AdvantageMethod::StepwisePerstep),
            "stepwise-ema" => Ok(AdvantageMethod::StepwiseEma),
            "stepwise-gae" => Ok(AdvantageMethod::StepwiseGae),
            "pdistill" => Ok(AdvantageMethod::Pdistill),
            other => Err(Error::Config(format!("unknown advantage method '{other}'"))),
        }
    }
}

/// N x T advantages plus the method that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageMatrix {
    pub matrix: GainMatrix,
    pub method: AdvantageMethod,
}

impl AdvantageMatrix {
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.matrix.get(i, k)
    }
}

/// Gains from stepwise reward rows (each `T + 1` long, t = 1 ... 0 order):
/// `g[i][k] = r[i][k+1] - r[i][k]`.
pub fn gains(reward_rows: &[Vec<f64>]) -> Result<GainMatrix> {
    let diffs: Vec<Vec<f64>> = reward_rows
        .iter()
        .map(|row| row.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    GainMatrix::from_rows(&diffs)
}

fn mean_and_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes over all N*T entries jointly, preserving the relative
/// magnitudes of early and late transitions.
pub fn joint_normalize(g: &GainMatrix) -> AdvantageMatrix {
    let (mean, std) = mean_and_std(g.values.iter().copied());
    let values = if std < DEGENERATE_STD {
        vec![0.0; g.values.len()]
    } else {
        g.values.iter().map(|v| (v - mean) / std).collect()
    };
    AdvantageMatrix {
        matrix: GainMatrix {
            values,
            rows: g.rows,
            cols: g.cols,
        },
        method: AdvantageMethod::StepwiseJoint,
    }
}

/// Standardizes each transition column separately.
pub fn perstep_normalize(g: &GainMatrix) -> AdvantageMatrix {
    let mut values = vec![0.0; g.values.len()];
    for k in 0..g.cols {
        let column = (0..g.rows).map(|i| g.get(i, k));
        let (mean, std) = mean_and_std(column);
        if std >= DEGENERATE_STD {
            for i in 0..g.rows {
                values[i * g.cols + k] = (g.get(i, k) - mean) / std;
            }
        }
    }
    AdvantageMatrix {
        matrix: GainMatrix {
            values,
            rows: g.rows,
            cols: g.cols,
        },
        method: AdvantageMethod::StepwisePerstep,
    }
}

/// Final-reward advantages, standardized over the group and broadcast across
/// all T transitions of each trajectory.
pub fn uniform_advantage(final_rewards: &[f64], cols: usize) -> AdvantageMatrix {
    let (mean, std) = mean_and_std(final_rewards.iter().copied());
    let mut values = Vec::with_capacity(final_rewards.len() * cols);
    for r in final_rewards {
        let a = if std < DEGENERATE_STD { 0.0 } else { (r - mean) / std };
        values.extend(std::iter::repeat(a).take(cols));
    }
    AdvantageMatrix {
        matrix: GainMatrix {
            values,
            rows: final_rewards.len(),
            cols,
        },
        method: AdvantageMethod::Uniform,
    }
}

/// Per-transition EMA baseline over gains.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub baseline: Vec<f64>,
    pub decay: f64,
    pub initialized: bool,
}

impl EmaState {
    pub fn new(cols: usize, decay: f64) -> Self {
        Self {
            baseline: vec![0.0; cols],
            decay,
            initialized: false,
        }
    }
}

/// Centers gains with the pre-update baseline, then folds the current column
/// means into the baseline: `b <- decay * b + (1 - decay) * mean_i g[i][k]`.
pub fn ema_center(g: &GainMatrix, state: &EmaState) -> (GainMatrix, EmaState) {
    assert_eq!(state.baseline.len(), g.cols, "baseline length must equal T");
    let mut values = Vec::with_capacity(g.values.len());
    for i in 0..g.rows {
        for k in 0..g.cols {
            values.push(g.get(i, k) - state.baseline[k]);
        }
    }
    let mut next = state.clone();
    for k in 0..g.cols {
        let mean = (0..g.rows).map(|i| g.get(i, k)).sum::<f64>() / g.rows as f64;
        next.baseline[k] = state.decay * state.baseline[k] + (1.0 - state.decay) * mean;
    }
    next.initialized = true;
    (
        GainMatrix {
            values,
            rows: g.rows,
            cols: g.cols,
        },
        next,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaeDirection {
    /// Credit flows from later (closer to the final sample) transitions back
    /// to earlier ones: entry k accumulates `sum_{j >= k} gamma^(j-k) g[j]`.
    TowardFinal,
    /// The appendix formula read literally, accumulating in the opposite
    /// index direction: entry k accumulates `sum_{j <= k} gamma^(k-j) g[j]`.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeConfig {
    pub gamma: f64,
    pub direction: GaeDirection,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            direction: GaeDirection::TowardFinal,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Config("gae gamma must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Discounted accumulation of gains along each row.
pub fn gae(g: &GainMatrix, cfg: &GaeConfig) -> GainMatrix {
    let mut values = vec![0.0; g.values.len()];
    for i in 0..g.rows {
        let row = g.row(i);
        let out = &mut values[i * g.cols..(i + 1) * g.cols];
        match cfg.direction {
            GaeDirection::TowardFinal => {
                let mut acc = 0.0;
                for k in (0..g.cols).rev() {
                    acc = row[k] + cfg.gamma * acc;
                    out[k] = acc;
                }
            }
            GaeDirection::PaperLiteral => {
                let mut acc = 0.0;
                for k in 0..g.cols {
                    acc = row[k] + cfg.gamma * acc;
                    out[k] = acc;
                }
            }
        }
    }
    GainMatrix {
        values,
        rows: g.rows,
        cols: g.cols,
    }
}

/// Mean absolute gain per transition over a set of scored groups, with the
/// trajectory count that entered the average.
pub fn gain_profile(groups: &[Group]) -> (Vec<f64>, usize) {
    assert!(!groups.is_empty(), "gain profile needs at least one group");
    let cols = groups[0].trajectories[0].gains.len();
    let mut profile = vec![0.0; cols];
    let mut count = 0usize;
    for group in groups {
        for traj in &group.trajectories {
            assert_eq!(traj.gains.len(), cols, "trajectories share T");
            for (p, g) in profile.iter_mut().zip(&traj.gains) {
                *p += g.abs();
            }
            count += 1;
        }
    }
    for p in &mut profile {
        *p /= count as f64;
    }
    (profile, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXACT: f64 = 1e-12;

    fn matrix(rows: &[Vec<f64>]) -> GainMatrix {
        GainMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn gains_are_forward_differences() {
        let g = gains(&[vec![0.2, 0.5, 0.4, 0.9]]).unwrap();
        let expected = [0.3, -0.1, 0.5];
        for (got, want) in g.row(0).iter().zip(&expected) {
            assert!((got - want).abs() < EXACT);
        }
        let total: f64 = g.row(0).iter().sum();
        assert!((total - 0.7).abs() < EXACT);
    }

    #[test]
    fn constant_rewards_give_zero_gains() {
        let g = gains(&[vec![0.4; 6], vec![0.4; 6]]).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gains_reject_ragged_rows() {
        assert!(gains(&[vec![1.0, 2.0], vec![1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn joint_normalize_hand_example() {
        // mean 2, population std sqrt(0.5) over all four entries.
        let adv = joint_normalize(&matrix(&[vec![1.0, 3.0], vec![2.0, 2.0]]));
        assert!((adv.get(0, 0) - (-1.4142136)).abs() < 1e-7);
        assert!((adv.get(0, 1) - 1.4142136).abs() < 1e-7);
        assert!(adv.get(1, 0).abs() < EXACT);
        assert!(adv.get(1, 1).abs() < EXACT);
    }

    #[test]
    fn joint_normalize_standardizes() {
        let adv = joint_normalize(&matrix(&[
            vec![0.3, -0.4, 2.0],
            vec![1.0, 0.0, -0.7],
        ]));
        let n = 6.0;
        let mean: f64 = adv.matrix.values().iter().sum::<f64>() / n;
        let var: f64 = adv.matrix.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var.sqrt() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn joint_normalize_degenerate_guard() {
        let adv = joint_normalize(&matrix(&[vec![0.7, 0.7], vec![0.7, 0.7]]));
        assert!(adv.matrix.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn perstep_normalize_hand_example() {
        let adv = perstep_normalize(&matrix(&[vec![1.0, 3.0], vec![2.0, 2.0]]));
        assert!((adv.get(0, 0) + 1.0).abs() < EXACT);
        assert!((adv.get(0, 1) - 1.0).abs() < EXACT);
        assert!((adv.get(1, 0) - 1.0).abs() < EXACT);
        assert!((adv.get(1, 1) + 1.0).abs() < EXACT);
    }

    #[test]
    fn perstep_normalize_degenerate_column() {
        let adv = perstep_normalize(&matrix(&[vec![5.0, 1.0], vec![5.0, 3.0]]));
        assert_eq!(adv.get(0, 0), 0.0);
        assert_eq!(adv.get(1, 0), 0.0);
        assert!((adv.get(0, 1) + 1.0).abs() < EXACT);
    }

    #[test]
    fn perstep_columns_have_zero_mean() {
        let adv = perstep_normalize(&matrix(&[
            vec![0.1, 0.9, -0.3],
            vec![0.4, 0.2, 0.0],
            vec![-0.2, 0.5, 0.7],
        ]));
        for k in 0..3 {
            let mean: f64 = (0..3).map(|i| adv.get(i, k)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_advantage_broadcasts() {
        let adv = uniform_advantage(&[1.0, 3.0], 4);
        for k in 0..4 {
            assert!((adv.get(0, k) + 1.0).abs() < EXACT);
            assert!((adv.get(1, k) - 1.0).abs() < EXACT);
        }
        let flat = uniform_advantage(&[2.0, 2.0, 2.0], 3);
        assert!(flat.matrix.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ema_center_first_call_passes_gains_through() {
        let g = matrix(&[vec![0.5, -0.3], vec![0.1, 0.7]]);
        let state = EmaState::new(2, 0.99);
        let (centered, next) = ema_center(&g, &state);
        assert_eq!(centered.values(), g.values());
        assert!((next.baseline[0] - 0.01 * 0.3).abs() < EXACT);
        assert!((next.baseline[1] - 0.01 * 0.2).abs() < EXACT);
        assert!(next.initialized);
    }

    #[test]
    fn ema_converges_to_stationary_mean() {
        let g = matrix(&[vec![2.0, -1.0], vec![2.0, -1.0]]);
        let mut state = EmaState::new(2, 0.9);
        for _ in 0..200 {
            let (_, next) = ema_center(&g, &state);
            state = next;
        }
        assert!((state.baseline[0] - 2.0).abs() < 1e-8);
        assert!((state.baseline[1] + 1.0).abs() < 1e-8);
        let (centered, _) = ema_center(&g, &state);
        let mean0 = (centered.get(0, 0) + centered.get(1, 0)) / 2.0;
        assert!(mean0.abs() < 1e-8);
    }

    #[test]
    fn ema_decay_one_freezes_baseline() {
        let g = matrix(&[vec![5.0], vec![7.0]]);
        let state = EmaState::new(1, 1.0);
        let (_, next) = ema_center(&g, &state);
        assert_eq!(next.baseline, vec![0.0]);
    }

    #[test]
    fn gae_toward_final_hand_example() {
        let g = matrix(&[vec![1.0, 2.0]]);
        let out = gae(
            &g,
            &GaeConfig {
                gamma: 0.95,
                direction: GaeDirection::TowardFinal,
            },
        );
        assert!((out.get(0, 0) - 2.9).abs() < EXACT);
        assert!((out.get(0, 1) - 2.0).abs() < EXACT);
    }

    #[test]
    fn gae_tiny_gamma_recovers_raw_gains() {
        let g = matrix(&[vec![0.3, -0.2, 0.8]]);
        let out = gae(
            &g,
            &GaeConfig {
                gamma: 1e-12,
                direction: GaeDirection::TowardFinal,
            },
        );
        for k in 0..3 {
            assert!((out.get(0, k) - g.get(0, k)).abs() < 1e-11);
        }
    }

    #[test]
    fn gae_gamma_one_gives_suffix_sums() {
        let g = matrix(&[vec![0.2, 0.3, -0.1]]);
        let out = gae(
            &g,
            &GaeConfig {
                gamma: 1.0,
                direction: GaeDirection::TowardFinal,
            },
        );
        assert!((out.get(0, 0) - 0.4).abs() < EXACT);
        assert!((out.get(0, 1) - 0.2).abs() < EXACT);
        assert!((out.get(0, 2) + 0.1).abs() < EXACT);
    }

    #[test]
    fn gae_paper_literal_runs_the_other_way() {
        let g = matrix(&[vec![1.0, 2.0]]);
        let out = gae(
            &g,
            &GaeConfig {
                gamma: 0.95,
                direction: GaeDirection::PaperLiteral,
            },
        );
        assert!((out.get(0, 0) - 1.0).abs() < EXACT);
        assert!((out.get(0, 1) - (2.0 + 0.95)).abs() < EXACT);
    }

    #[test]
    fn shift_invariance_of_gains() {
        // Dyadic rewards and shift keep the sums exact, so the gains (and
        // hence every gain-based advantage) are bitwise unchanged.
        let base = vec![vec![0.125, 0.625, 0.25, 0.875], vec![0.0, 0.375, 0.75, 0.5]];
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|row| row.iter().map(|r| r + 2.0).collect())
            .collect();
        let g1 = gains(&base).unwrap();
        let g2 = gains(&shifted).unwrap();
        assert_eq!(g1.values(), g2.values());
        assert_eq!(
            joint_normalize(&g1).matrix.values(),
            joint_normalize(&g2).matrix.values()
        );
    }

    #[test]
    fn scaling_preserves_joint_ranking() {
        let g = matrix(&[vec![0.4, -0.7, 0.1], vec![0.9, 0.0, -0.2]]);
        let scaled = GainMatrix::from_rows(&[
            g.row(0).iter().map(|v| v * 3.7).collect(),
            g.row(1).iter().map(|v| v * 3.7).collect(),
        ])
        .unwrap();
        let a = joint_normalize(&g);
        let b = joint_normalize(&scaled);
        let order = |m: &AdvantageMatrix| {
            let mut idx: Vec<usize> = (0..6).collect();
            idx.sort_by(|&p, &q| m.matrix.values()[p].total_cmp(&m.matrix.values()[q]));
            idx
        };
        assert_eq!(order(&a), order(&b));
    }
}
