//! Reward for a (patch mask, prediction) pair and the self-critical advantage.

use serde::{Deserialize, Serialize};

use crate::classifier::Prediction;
use crate::error::{Error, Result};
use crate::grid::PatchMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Magnitude of the misclassification penalty; the reward is `-sigma`.
    pub sigma: f64,
    pub num_patches: usize,
}

impl RewardConfig {
    pub fn new(sigma: f64, num_patches: usize) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) || num_patches == 0 {
            return Err(Error::InvalidArgument(format!(
                "reward needs sigma >= 0 and P > 0, got sigma={sigma}, P={num_patches}"
            )));
        }
        Ok(RewardConfig { sigma, num_patches })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub reward: f64,
    pub correct: bool,
    pub sampled: usize,
}

/// `1 - (S/P)^2` for a correct prediction, `-sigma` otherwise.
pub fn reward_value(sampled: usize, correct: bool, cfg: &RewardConfig) -> f64 {
    if correct {
        let frac = sampled as f64 / cfg.num_patches as f64;
        1.0 - frac * frac
    } else {
        -cfg.sigma
    }
}

pub fn reward(mask: &PatchMask, pred: &Prediction, label: usize, cfg: &RewardConfig) -> RewardOutcome {
    debug_assert_eq!(mask.len(), cfg.num_patches);
    let correct = pred.class == label;
    let sampled = mask.count();
    RewardOutcome {
        reward: reward_value(sampled, correct, cfg),
        correct,
        sampled,
    }
}

/// Sampled-action reward minus the greedy-action reward.
pub fn advantage(sampled: &RewardOutcome, baseline: &RewardOutcome) -> f64 {
    sampled.reward - baseline.reward
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(class: usize) -> Prediction {
        Prediction { class, confidence: 1.0 }
    }

    #[test]
    fn reward_cases() {
        let cfg = RewardConfig::new(5.0, 16).unwrap();
        let none = PatchMask::all(16, false);
        let all = PatchMask::all(16, true);
        let half = PatchMask::from_code(16, 0x00ff);
        assert_eq!(reward(&none, &pred(1), 1, &cfg).reward, 1.0);
        assert_eq!(reward(&all, &pred(1), 1, &cfg).reward, 0.0);
        assert_eq!(reward(&half, &pred(1), 1, &cfg).reward, 0.75);
        let wrong = reward(&half, &pred(0), 1, &cfg);
        assert_eq!(wrong.reward, -5.0);
        assert!(!wrong.correct);
        assert_eq!(wrong.sampled, 8);
    }

    #[test]
    fn advantage_cases() {
        let cfg = RewardConfig::new(5.0, 16).unwrap();
        let four = reward(&PatchMask::from_code(16, 0xf), &pred(2), 2, &cfg);
        let eight = reward(&PatchMask::from_code(16, 0xff), &pred(2), 2, &cfg);
        assert_eq!(advantage(&four, &four), 0.0);
        assert!((advantage(&four, &eight) - 0.1875).abs() < 1e-15);
        let wrong = reward(&PatchMask::from_code(16, 0x1), &pred(0), 2, &cfg);
        let full = reward(&PatchMask::all(16, true), &pred(2), 2, &cfg);
        assert_eq!(advantage(&wrong, &full), -5.0);
    }

    #[test]
    fn reward_strictly_decreasing_among_correct() {
        let cfg = RewardConfig::new(0.5, 16).unwrap();
        let r: Vec<f64> = (0..=16).map(|s| reward_value(s, true, &cfg)).collect();
        assert!(r.windows(2).all(|w| w[0] > w[1]));
        assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(RewardConfig::new(-0.5, 16).is_err());
    }
}
