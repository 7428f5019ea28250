//! The five-part reward algebra: process, retrieval shaping, information
//! gain, operational penalties, terminal accuracy, episode aggregation,
//! and GRPO group-relative advantages. Pure arithmetic throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::case::DiagnosisLabel;
use crate::judge::{RubricDim, RubricScores};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("process reward needs at least one rubric dimension")]
    EmptyDims,
    #[error("no penalty weight configured for event kind {0:?}")]
    UnknownEventKind(String),
}

/// The closed set of penalized operational events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Format,
    Loop,
    Budget,
}

impl PenaltyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyKind::Format => "format",
            PenaltyKind::Loop => "loop",
            PenaltyKind::Budget => "budget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub s_max: u8,
    pub dims: Vec<RubricDim>,
    pub lambda_retr: f64,
    pub lambda_gain: f64,
    pub lambda_proc: f64,
    pub penalty_weights: BTreeMap<PenaltyKind, f64>,
    pub terminal_weight: f64,
    pub turn_weight: f64,
    pub alpha_sim: f64,
    pub alpha_qual: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            s_max: 5,
            dims: vec![RubricDim::Sym, RubricDim::Diff, RubricDim::Dec],
            lambda_retr: 0.01,
            lambda_gain: 0.005,
            lambda_proc: 0.01,
            penalty_weights: BTreeMap::from([
                (PenaltyKind::Format, 0.1),
                (PenaltyKind::Loop, 0.1),
                (PenaltyKind::Budget, 0.1),
            ]),
            terminal_weight: 5.0,
            turn_weight: 1.0,
            alpha_sim: 0.5,
            alpha_qual: 0.5,
        }
    }
}

/// One turn's reward components; `turn_total` is their sum to 1e-12.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub proc: f64,
    pub retr: f64,
    pub gain: f64,
    pub pen: f64,
    pub turn_total: f64,
}

impl RewardBreakdown {
    pub fn new(proc: f64, retr: f64, gain: f64, pen: f64) -> Self {
        Self {
            proc,
            retr,
            gain,
            pen,
            turn_total: proc + retr + gain + pen,
        }
    }

    pub fn check_total(&self) -> Result<(), f64> {
        let delta = (self.turn_total - (self.proc + self.retr + self.gain + self.pen)).abs();
        if delta <= 1e-12 {
            Ok(())
        } else {
            Err(delta)
        }
    }
}

/// r_proc = lambda_proc * (1/|dims|) * sum over dims of score/s_max.
pub fn process_reward(scores: &RubricScores, cfg: &RewardConfig) -> Result<f64, RewardError> {
    if cfg.dims.is_empty() {
        return Err(RewardError::EmptyDims);
    }
    let sum: f64 = cfg
        .dims
        .iter()
        .map(|d| f64::from(scores.get(*d)) / f64::from(cfg.s_max))
        .sum();
    Ok(cfg.lambda_proc * sum / cfg.dims.len() as f64)
}

/// r_retr = lambda_retr * rho.
pub fn retrieval_reward(rho: f64, cfg: &RewardConfig) -> f64 {
    cfg.lambda_retr * rho
}

/// r_gain = lambda_gain * newly_revealed.
pub fn info_gain_reward(newly_revealed: usize, cfg: &RewardConfig) -> f64 {
    cfg.lambda_gain * newly_revealed as f64
}

/// r_pen = -(sum of configured weights over the events). Zero when empty.
pub fn penalty(events: &[PenaltyKind], cfg: &RewardConfig) -> Result<f64, RewardError> {
    let mut total = 0.0;
    for event in events {
        let w = cfg
            .penalty_weights
            .get(event)
            .ok_or_else(|| RewardError::UnknownEventKind(event.as_str().to_string()))?;
        total += w;
    }
    Ok(-total)
}

/// r_term = terminal_weight when the prediction matches the ground truth;
/// budget exhaustion without a diagnosis (None) scores as incorrect.
pub fn terminal_reward(
    predicted: Option<DiagnosisLabel>,
    truth: DiagnosisLabel,
    cfg: &RewardConfig,
) -> f64 {
    match predicted {
        Some(label) if label == truth => cfg.terminal_weight,
        _ => 0.0,
    }
}

/// R = turn_weight * sum of per-turn totals + terminal.
pub fn aggregate(turns: &[RewardBreakdown], terminal: f64, cfg: &RewardConfig) -> f64 {
    cfg.turn_weight * turns.iter().map(|b| b.turn_total).sum::<f64>() + terminal
}

/// Group-relative advantages: (R_i - mean) / population std, all zeros
/// when the group is (numerically) constant.
pub fn grpo_advantages(returns: &[f64]) -> Vec<f64> {
    let n = returns.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; n];
    }
    returns.iter().map(|r| (r - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(sym: u8, diff: u8, dec: u8) -> RubricScores {
        RubricScores {
            sym,
            diff,
            dec,
            emp: 0,
            nat: 0,
            s_max: 5,
        }
    }

    fn unit_proc_cfg() -> RewardConfig {
        RewardConfig {
            lambda_proc: 1.0,
            ..RewardConfig::default()
        }
    }

    #[test]
    fn process_reward_hand_values() {
        let cfg = unit_proc_cfg();
        assert!((process_reward(&scores(5, 5, 5), &cfg).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(process_reward(&scores(0, 0, 0), &cfg).unwrap(), 0.0);
        assert!((process_reward(&scores(3, 4, 5), &cfg).unwrap() - 0.8).abs() <= 1e-12);
    }

    #[test]
    fn process_reward_requires_dims() {
        let cfg = RewardConfig {
            dims: vec![],
            ..RewardConfig::default()
        };
        assert!(matches!(
            process_reward(&scores(1, 1, 1), &cfg),
            Err(RewardError::EmptyDims)
        ));
    }

    #[test]
    fn process_reward_is_bounded_by_lambda() {
        let cfg = RewardConfig::default();
        for s in 0..=5u8 {
            let r = process_reward(&scores(s, s, s), &cfg).unwrap();
            assert!((0.0..=cfg.lambda_proc + 1e-15).contains(&r));
        }
    }

    #[test]
    fn retrieval_reward_is_a_product() {
        let mut cfg = RewardConfig::default();
        cfg.lambda_retr = 0.5;
        assert!((retrieval_reward(0.8, &cfg) - 0.4).abs() <= 1e-12);
        cfg.lambda_retr = 0.0;
        assert_eq!(retrieval_reward(123.0, &cfg), 0.0);
        cfg.lambda_retr = 0.5;
        assert_eq!(retrieval_reward(0.0, &cfg), 0.0);
    }

    #[test]
    fn info_gain_hand_values_and_linearity() {
        let cfg = RewardConfig::default();
        assert!((info_gain_reward(2, &cfg) - 0.01).abs() <= 1e-12);
        assert_eq!(info_gain_reward(0, &cfg), 0.0);
        assert!((info_gain_reward(5, &cfg) - 0.025).abs() <= 1e-12);
        let (a, b) = (3, 4);
        assert!(
            (info_gain_reward(a + b, &cfg) - (info_gain_reward(a, &cfg) + info_gain_reward(b, &cfg)))
                .abs()
                <= 1e-12
        );
    }

    #[test]
    fn penalty_sums_with_negative_sign() {
        let cfg = RewardConfig::default();
        assert!((penalty(&[PenaltyKind::Format], &cfg).unwrap() + 0.1).abs() <= 1e-12);
        assert_eq!(penalty(&[], &cfg).unwrap(), 0.0);
        assert!(
            (penalty(&[PenaltyKind::Format, PenaltyKind::Loop], &cfg).unwrap() + 0.2).abs()
                <= 1e-12
        );
        assert!(penalty(&[PenaltyKind::Budget], &cfg).unwrap() <= 0.0);
    }

    #[test]
    fn penalty_rejects_unpriced_kinds() {
        let mut cfg = RewardConfig::default();
        cfg.penalty_weights.remove(&PenaltyKind::Loop);
        assert!(matches!(
            penalty(&[PenaltyKind::Loop], &cfg),
            Err(RewardError::UnknownEventKind(k)) if k == "loop"
        ));
    }

    #[test]
    fn terminal_reward_cases() {
        let cfg = RewardConfig::default();
        assert_eq!(
            terminal_reward(Some(DiagnosisLabel::Depression), DiagnosisLabel::Depression, &cfg),
            5.0
        );
        assert_eq!(
            terminal_reward(Some(DiagnosisLabel::Anxiety), DiagnosisLabel::Mix, &cfg),
            0.0
        );
        assert_eq!(terminal_reward(None, DiagnosisLabel::Other, &cfg), 0.0);
    }

    #[test]
    fn aggregate_hand_value() {
        let cfg = RewardConfig::default();
        let turns: Vec<RewardBreakdown> = [0.8, 0.01, -0.1]
            .iter()
            .map(|t| RewardBreakdown {
                proc: *t,
                retr: 0.0,
                gain: 0.0,
                pen: 0.0,
                turn_total: *t,
            })
            .collect();
        assert!((aggregate(&turns, 5.0, &cfg) - 5.71).abs() <= 1e-12);
        assert_eq!(aggregate(&[], 0.0, &cfg), 0.0);
        let zero_alpha = RewardConfig {
            turn_weight: 0.0,
            ..RewardConfig::default()
        };
        assert_eq!(aggregate(&turns, 5.0, &zero_alpha), 5.0);
    }

    #[test]
    fn breakdown_total_invariant() {
        let b = RewardBreakdown::new(0.5, 0.1, 0.01, -0.1);
        assert!(b.check_total().is_ok());
        let bad = RewardBreakdown {
            turn_total: 99.0,
            ..b
        };
        assert!(bad.check_total().is_err());
    }

    #[test]
    fn grpo_pinned_groups() {
        assert_eq!(grpo_advantages(&[1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
        let a = grpo_advantages(&[0.0, 2.0]);
        assert!((a[0] + 1.0).abs() <= 1e-12);
        assert!((a[1] - 1.0).abs() <= 1e-12);
        assert_eq!(grpo_advantages(&[42.0]), vec![0.0]);
        assert!(grpo_advantages(&[]).is_empty());
    }

    #[test]
    fn grpo_normalization_and_shift_invariance() {
        let returns = [3.0, -1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let adv = grpo_advantages(&returns);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let std =
            (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
        assert!(mean.abs() <= 1e-9);
        assert!((std - 1.0).abs() <= 1e-9);

        let shifted: Vec<f64> = returns.iter().map(|r| r + 17.25).collect();
        let adv2 = grpo_advantages(&shifted);
        for (x, y) in adv.iter().zip(&adv2) {
            assert!((x - y).abs() <= 1e-9);
        }

        let scaled: Vec<f64> = returns.iter().map(|r| r * 3.5).collect();
        let adv3 = grpo_advantages(&scaled);
        let mut order: Vec<usize> = (0..adv.len()).collect();
        let mut order3 = order.clone();
        order.sort_by(|&i, &j| adv[i].total_cmp(&adv[j]));
        order3.sort_by(|&i, &j| adv3[i].total_cmp(&adv3[j]));
        assert_eq!(order, order3);
    }

    #[test]
    fn default_config_carries_published_weights() {
        let cfg = RewardConfig::default();
        assert_eq!(cfg.terminal_weight, 5.0);
        assert_eq!(cfg.lambda_gain, 0.005);
        assert_eq!(cfg.lambda_proc, 0.01);
        assert_eq!(cfg.penalty_weights[&PenaltyKind::Format], 0.1);
        assert_eq!(cfg.penalty_weights[&PenaltyKind::Loop], 0.1);
        assert_eq!(cfg.penalty_weights[&PenaltyKind::Budget], 0.1);
        assert_eq!(cfg.turn_weight, 1.0);
        assert_eq!((cfg.alpha_sim, cfg.alpha_qual), (0.5, 0.5));
        assert_eq!(cfg.s_max, 5);
        assert_eq!(cfg.dims, vec![RubricDim::Sym, RubricDim::Diff, RubricDim::Dec]);
    }
}
