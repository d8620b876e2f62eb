//! First-step actions: per-patch Bernoulli probabilities from the policy
//! network, exploration scaling, sampling and the greedy baseline action.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PatchMask, NUM_PATCHES};
use crate::nn::{Network, Tensor};
use crate::rng::Rng;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-6;

/// One Bernoulli parameter per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionProbs(pub Vec<f64>);

impl ActionProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("action probability {p} outside [0, 1]")));
        }
        Ok(ActionProbs(probs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Exploration parameter that moves linearly from `start` to `end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl AlphaSchedule {
    pub fn new(start: f64, end: f64, total_steps: u64) -> Result<Self> {
        if !(0.0 <= start && start <= end && end <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha schedule needs 0 <= start <= end <= 1, got {start} -> {end}"
            )));
        }
        Ok(AlphaSchedule { start, end, total_steps })
    }

    pub fn constant(alpha: f64) -> Self {
        AlphaSchedule { start: alpha, end: alpha, total_steps: 1 }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return if step == 0 { self.start } else { self.end };
        }
        let t = (step as f64 / (self.total_steps - 1) as f64).min(1.0);
        self.start + (self.end - self.start) * t
    }
}

/// Runs the policy network on a batch of LR images `[B, C, h, w]`.
pub fn policy_forward_batch(net: &Network, x_l: &Tensor) -> Result<Vec<ActionProbs>> {
    let out = net.infer(x_l)?;
    check_policy_output(&out)?;
    Ok((0..out.rows()).map(|i| ActionProbs(out.row_slice(i).to_vec())).collect())
}

/// Runs the policy network on one LR image `[C, h, w]`.
pub fn policy_forward(net: &Network, x_l: &Tensor) -> Result<ActionProbs> {
    let mut shape = vec![1];
    shape.extend_from_slice(x_l.shape());
    let batched = x_l.clone().reshape(&shape)?;
    Ok(policy_forward_batch(net, &batched)?.remove(0))
}

pub(crate) fn check_policy_output(out: &Tensor) -> Result<()> {
    if out.shape().len() != 2 || out.shape()[1] != NUM_PATCHES {
        return Err(Error::shape("policy output", &[out.shape()[0], NUM_PATCHES], out.shape()));
    }
    Ok(())
}

/// `alpha * s + (1 - alpha) * (1 - s)`, pulling probabilities toward 0.5.
///
/// Evaluated as `(1 - alpha) + (2 alpha - 1) s`, which is exact at `alpha = 1`,
/// `alpha = 0.5` and `s = 0.5`.
pub fn temperature_scale(s: &ActionProbs, alpha: f64) -> ActionProbs {
    let slope = 2.0 * alpha - 1.0;
    ActionProbs(s.0.iter().map(|&p| (1.0 - alpha) + slope * p).collect())
}

/// Independent Bernoulli draw per patch.
pub fn sample_action(s: &ActionProbs, rng: &mut Rng) -> PatchMask {
    PatchMask::new(s.0.iter().map(|&p| rng.random::<f64>() < p).collect())
}

/// Bit `i` is set iff `s_i > 0.5`.
pub fn greedy_action(s: &ActionProbs) -> PatchMask {
    PatchMask::new(s.0.iter().map(|&p| p > 0.5).collect())
}

/// Log-likelihood of `mask` under independent Bernoullis `s`, and its
/// gradient with respect to `s`.
pub fn log_prob_and_grad(s: &ActionProbs, mask: &PatchMask) -> Result<(f64, Vec<f64>)> {
    if s.len() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities for a {}-bit mask",
            s.len(),
            mask.len()
        )));
    }
    let mut log_prob = 0.0;
    let grad = s
        .0
        .iter()
        .zip(mask.bits())
        .map(|(&p, &bit)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if bit {
                log_prob += p.ln();
                1.0 / p
            } else {
                log_prob += (1.0 - p).ln();
                -1.0 / (1.0 - p)
            }
        })
        .collect();
    Ok((log_prob, grad))
}
