use serde::{Deserialize, Serialize};

use super::{ClassifierUpdate, StageConfig, TrainState};
use crate::classifier::{classify_batch, fuse, predict, ClassifierMode, ClassProbs};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::grid::{apply_mask, PatchGrid, PatchMask, NUM_PATCHES};
use crate::nn::{cross_entropy_batch, AdamState, Network, Tensor};
use crate::policy::{greedy_action, log_prob_and_grad, sample_action, temperature_scale, ActionProbs};
use crate::reward::{advantage, reward, RewardConfig};
use crate::rng::Rng;

/// Score-function term `A * d log pi(mask | s) / ds` for one sample.
pub fn score_function_gradient(s: &ActionProbs, mask: &PatchMask, advantage: f64) -> Result<Vec<f64>> {
    let (_, grad) = log_prob_and_grad(s, mask)?;
    Ok(grad.into_iter().map(|g| advantage * g).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    /// Averages over the sampled (exploratory) actions.
    pub mean_reward: f64,
    pub mean_s: f64,
    pub accuracy: f64,
    pub mean_advantage: f64,
    pub policy_updated: bool,
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

/// Sampled and greedy actions for a batch of policy outputs `[B, P]`.
pub(crate) struct Exploration {
    pub sampled: Vec<PatchMask>,
    pub greedy: Vec<PatchMask>,
    /// Distribution whose likelihood is differentiated.
    grad_probs: Vec<ActionProbs>,
    /// `ds'/ds`: `2 alpha - 1` through the scaling, 1 otherwise.
    chain: f64,
    shape: Vec<usize>,
}

pub(crate) fn explore(s_out: &Tensor, alpha: f64, through_scaling: bool, rng: &mut Rng) -> Result<Exploration> {
    crate::policy::check_policy_output(s_out)?;
    let b = s_out.rows();
    let mut ex = Exploration {
        sampled: Vec::with_capacity(b),
        greedy: Vec::with_capacity(b),
        grad_probs: Vec::with_capacity(b),
        chain: if through_scaling { 2.0 * alpha - 1.0 } else { 1.0 },
        shape: s_out.shape().to_vec(),
    };
    for i in 0..b {
        let s = ActionProbs(s_out.row_slice(i).to_vec());
        let scaled = temperature_scale(&s, alpha);
        ex.sampled.push(sample_action(&scaled, rng));
        ex.greedy.push(greedy_action(&s));
        ex.grad_probs.push(if through_scaling { scaled } else { s });
    }
    Ok(ex)
}

impl Exploration {
    /// Backpropagates the batch-mean policy gradient through `policy` (whose
    /// last forward produced these outputs) and takes an Adam step. With every
    /// advantage zero the estimate is exactly zero and the step is skipped, so
    /// Adam momentum cannot move the parameters.
    pub(crate) fn apply(&self, policy: &mut Network, opt: &mut AdamState, advantages: &[f64]) -> Result<bool> {
        let b = self.sampled.len();
        let mut grad = Tensor::zeros(&self.shape);
        for (i, &adv) in advantages.iter().enumerate() {
            let g = score_function_gradient(&self.grad_probs[i], &self.sampled[i], adv)?;
            let row = &mut grad.data_mut()[i * NUM_PATCHES..(i + 1) * NUM_PATCHES];
            for (dst, v) in row.iter_mut().zip(g) {
                // Adam minimizes, so this is d(-J)/ds.
                *dst = -v * self.chain / b as f64;
            }
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("policy gradient".into()));
        }
        if grad.data().iter().all(|&v| v == 0.0) {
            return Ok(false);
        }
        policy.backward(&grad)?;
        opt.step(policy)?;
        Ok(true)
    }
}

/// One self-critical REINFORCE update of the policy, plus an HR classifier
/// update in the finetuning stages. `alpha` is the current exploration level.
pub fn reinforce_step(
    batch: &Batch,
    state: &mut TrainState,
    cfg: &StageConfig,
    alpha: f64,
    rng: &mut Rng,
) -> Result<BatchMetrics> {
    let b = batch.labels.len();
    let grid = PatchGrid::new(batch.hr.shape()[2], batch.hr.shape()[3])?;
    let reward_cfg = RewardConfig::new(cfg.sigma, NUM_PATCHES)?;
    let mode = cfg.stage.classifier_mode();

    let s_out = state.policy.forward(&batch.lr)?;
    let ex = explore(&s_out, alpha, cfg.grad_through_scaling, rng)?;
    let (sampled, greedy) = (&ex.sampled, &ex.greedy);
    let mut hr_sampled = Vec::with_capacity(b);
    let mut hr_greedy = Vec::with_capacity(b);
    for i in 0..b {
        let hr = batch.hr.row(i);
        hr_sampled.push(apply_mask(&hr, &sampled[i], &grid)?);
        hr_greedy.push(apply_mask(&hr, &greedy[i], &grid)?);
    }
    let hr_sampled = stack(&hr_sampled)?;
    let hr_greedy = stack(&hr_greedy)?;
    let probs_sampled = classify_batch(&state.hr, &hr_sampled)?;
    let probs_greedy = classify_batch(&state.hr, &hr_greedy)?;
    let lr_probs = match mode {
        ClassifierMode::TwoStream => Some(classify_batch(&state.lr, &batch.lr)?),
        ClassifierMode::HrOnly => None,
    };
    let final_probs = |hr: &ClassProbs, i: usize, mask: &PatchMask| -> Result<ClassProbs> {
        match &lr_probs {
            Some(lr) => fuse(hr, &lr[i], mask.count(), NUM_PATCHES),
            None => Ok(hr.clone()),
        }
    };

    let (mut total_reward, mut total_s, mut correct) = (0.0, 0usize, 0usize);
    let mut advantages = Vec::with_capacity(b);
    for i in 0..b {
        let y = batch.labels[i];
        let rs = reward(&sampled[i], &predict(&final_probs(&probs_sampled[i], i, &sampled[i])?), y, &reward_cfg);
        let rg = reward(&greedy[i], &predict(&final_probs(&probs_greedy[i], i, &greedy[i])?), y, &reward_cfg);
        advantages.push(advantage(&rs, &rg));
        total_reward += rs.reward;
        total_s += rs.sampled;
        correct += rs.correct as usize;
    }
    let policy_updated = ex.apply(&mut state.policy, &mut state.policy_opt, &advantages)?;

    if cfg.stage.trains_hr_classifier() {
        let (input, labels) = match cfg.classifier_update {
            ClassifierUpdate::Sampled => (hr_sampled, batch.labels.clone()),
            ClassifierUpdate::Greedy => (hr_greedy, batch.labels.clone()),
            ClassifierUpdate::Both => {
                let mut rows: Vec<Tensor> = (0..b).map(|i| hr_sampled.row(i)).collect();
                rows.extend((0..b).map(|i| hr_greedy.row(i)));
                (stack(&rows)?, [batch.labels.clone(), batch.labels.clone()].concat())
            }
        };
        let probs = state.hr.forward(&input)?;
        let (loss, dprobs) = cross_entropy_batch(&probs, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("HR classifier loss {loss}")));
        }
        state.hr.backward(&dprobs)?;
        state.hr_opt.step(&mut state.hr)?;
    }
    state.step += 1;

    Ok(BatchMetrics {
        mean_reward: total_reward / b as f64,
        mean_s: total_s as f64 / b as f64,
        accuracy: correct as f64 / b as f64,
        mean_advantage: advantages.iter().sum::<f64>() / b as f64,
        policy_updated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Dataset, SyntheticSpec};
    use crate::nn::Layer;
    use crate::rng::{stream, Stream};
    use crate::train::Stage;

    fn setup() -> (Dataset, TrainState) {
        let raw = generate_synthetic(&SyntheticSpec { train: 16, val: 8, test: 8, ..Default::default() }).unwrap();
        let data = Dataset::prepare(&raw, 4).unwrap();
        let state = TrainState::new(data.train.hr_shape(), data.train.lr_shape(), 4, 1);
        (data, state)
    }

    #[test]
    fn score_function_matches_closed_form() {
        let s = ActionProbs(vec![0.8, 0.25]);
        let g = score_function_gradient(&s, &PatchMask::new(vec![true, false]), 2.0).unwrap();
        assert!((g[0] - 2.5).abs() < 1e-12);
        assert!((g[1] + 2.0 / 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        // A constant policy output of 1 makes sampled and greedy masks equal
        // (all patches), so every advantage is zero.
        let (data, mut state) = setup();
        for layer in state.policy.layers_mut() {
            if let Layer::Dense(d) = layer {
                d.weight.fill(0.0);
                d.bias.fill(50.0);
            }
        }
        let before = state.policy.clone();
        let cfg = StageConfig { alpha_start: 1.0, alpha_end: 1.0, ..StageConfig::defaults(Stage::Pt) };
        let batch = data.train.gather(&(0..16).collect::<Vec<_>>());
        let m = reinforce_step(&batch, &mut state, &cfg, 1.0, &mut stream(0, Stream::Policy)).unwrap();
        assert_eq!(m.mean_advantage, 0.0);
        assert!(!m.policy_updated);
        assert_eq!(state.policy, before);
        assert_eq!(m.mean_s, 16.0);
    }

    #[test]
    fn pt_step_freezes_classifiers_and_moves_policy() {
        let (data, mut state) = setup();
        let (hr, lr, policy) = (state.hr.clone(), state.lr.clone(), state.policy.clone());
        let cfg = StageConfig::defaults(Stage::Pt);
        let batch = data.train.gather(&(0..16).collect::<Vec<_>>());
        let m = reinforce_step(&batch, &mut state, &cfg, 0.7, &mut stream(0, Stream::Policy)).unwrap();
        assert!(m.policy_updated);
        assert_ne!(state.policy, policy);
        assert_eq!(state.hr, hr);
        assert_eq!(state.lr, lr);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn ft2_step_freezes_lr_stream_only() {
        let (data, mut state) = setup();
        let (hr, lr) = (state.hr.clone(), state.lr.clone());
        let batch = data.train.gather(&(0..16).collect::<Vec<_>>());
        for update in [ClassifierUpdate::Sampled, ClassifierUpdate::Greedy, ClassifierUpdate::Both] {
            let cfg = StageConfig { classifier_update: update, ..StageConfig::defaults(Stage::Ft2) };
            reinforce_step(&batch, &mut state, &cfg, 0.8, &mut stream(0, Stream::Policy)).unwrap();
        }
        assert_ne!(state.hr, hr);
        assert_eq!(state.lr, lr);
    }
}
