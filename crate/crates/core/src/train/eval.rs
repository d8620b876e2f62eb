use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::baselines::MaskPolicy;
use crate::classifier::{classify_batch, fuse, predict, ClassifierMode};
use crate::data::DatasetHandle;
use crate::error::Result;
use crate::grid::{apply_mask, PatchGrid, NUM_PATCHES};
use crate::nn::{Network, Tensor};
use crate::reward::{reward, RewardConfig};
use crate::rng::{stream, Stream};

const EVAL_BATCH: usize = 256;

/// Accuracy among test images that sampled exactly `s` patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SBucket {
    pub s: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_s: f64,
    pub mean_reward: f64,
    /// Fraction of images in which each patch was sampled.
    pub patch_frequency: Vec<f64>,
    pub by_s: Vec<SBucket>,
}

/// Evaluates a mask source and classifier mode on a split. Learned policies
/// act greedily, so repeated calls give identical reports; `seed` only feeds
/// stochastic baselines.
pub fn evaluate(
    split: &DatasetHandle,
    state: &TrainState,
    policy: &MaskPolicy,
    mode: ClassifierMode,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<EvalReport> {
    let shape = split.hr_shape();
    let grid = PatchGrid::new(shape[1], shape[2])?;
    let mut rng = stream(seed, Stream::Baseline);
    let mut correct = 0usize;
    let mut total_s = 0usize;
    let mut total_reward = 0.0;
    let mut freq = [0usize; NUM_PATCHES];
    let mut buckets = vec![(0usize, 0usize); NUM_PATCHES + 1];
    for idx in split.sequential_batches(EVAL_BATCH) {
        let batch = split.gather(&idx);
        let masks = policy.masks(&batch.lr, &grid, &mut rng)?;
        let masked = masks
            .iter()
            .enumerate()
            .map(|(i, m)| apply_mask(&batch.hr.row(i), m, &grid))
            .collect::<Result<Vec<_>>>()?;
        let hr_probs = classify_batch(&state.hr, &Tensor::stack(&masked.iter().collect::<Vec<_>>())?)?;
        let lr_probs = match mode {
            ClassifierMode::TwoStream => Some(classify_batch(&state.lr, &batch.lr)?),
            ClassifierMode::HrOnly => None,
        };
        for (i, mask) in masks.iter().enumerate() {
            let probs = match &lr_probs {
                Some(lr) => fuse(&hr_probs[i], &lr[i], mask.count(), NUM_PATCHES)?,
                None => hr_probs[i].clone(),
            };
            let out = reward(mask, &predict(&probs), batch.labels[i], reward_cfg);
            correct += out.correct as usize;
            total_s += out.sampled;
            total_reward += out.reward;
            for (f, &b) in freq.iter_mut().zip(mask.bits()) {
                *f += b as usize;
            }
            buckets[out.sampled].0 += 1;
            buckets[out.sampled].1 += out.correct as usize;
        }
    }
    let n = split.len() as f64;
    Ok(EvalReport {
        samples: split.len(),
        accuracy: correct as f64 / n,
        mean_s: total_s as f64 / n,
        mean_reward: total_reward / n,
        patch_frequency: freq.iter().map(|&f| f as f64 / n).collect(),
        by_s: buckets
            .iter()
            .enumerate()
            .filter(|(_, (count, _))| *count > 0)
            .map(|(s, &(count, ok))| SBucket { s, count, accuracy: ok as f64 / count as f64 })
            .collect(),
    })
}

/// Standalone accuracy of one classifier stream on full HR or LR images.
pub fn classifier_accuracy(net: &Network, split: &DatasetHandle, use_lr: bool) -> Result<f64> {
    let mut correct = 0usize;
    for idx in split.sequential_batches(EVAL_BATCH) {
        let batch = split.gather(&idx);
        let input = if use_lr { &batch.lr } else { &batch.hr };
        for (p, &y) in classify_batch(net, input)?.iter().zip(&batch.labels) {
            correct += (predict(p).class == y) as usize;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::BaselinePolicy;
    use crate::data::{generate_synthetic, Dataset, SyntheticSpec};

    fn setup() -> (Dataset, TrainState) {
        let raw = generate_synthetic(&SyntheticSpec { train: 20, val: 10, test: 30, ..Default::default() }).unwrap();
        let data = Dataset::prepare(&raw, 4).unwrap();
        let state = TrainState::new(data.train.hr_shape(), data.train.lr_shape(), 4, 5);
        (data, state)
    }

    #[test]
    fn constant_policies_reduce_to_single_streams() {
        let (data, state) = setup();
        let cfg = RewardConfig::new(0.5, 16).unwrap();
        let drop = MaskPolicy::Baseline(BaselinePolicy::constant(false));
        let keep = MaskPolicy::Baseline(BaselinePolicy::constant(true));
        let r = evaluate(&data.test, &state, &drop, ClassifierMode::TwoStream, &cfg, 0).unwrap();
        assert_eq!(r.accuracy, classifier_accuracy(&state.lr, &data.test, true).unwrap());
        assert_eq!(r.mean_s, 0.0);
        let r = evaluate(&data.test, &state, &keep, ClassifierMode::TwoStream, &cfg, 0).unwrap();
        assert_eq!(r.accuracy, classifier_accuracy(&state.hr, &data.test, false).unwrap());
        assert_eq!(r.mean_s, 16.0);
    }

    #[test]
    fn frequencies_count_patches_and_eval_is_repeatable() {
        let (data, state) = setup();
        let cfg = RewardConfig::new(0.5, 16).unwrap();
        let learned = MaskPolicy::Learned(&state.policy);
        let r = evaluate(&data.test, &state, &learned, ClassifierMode::HrOnly, &cfg, 0).unwrap();
        assert!(r.patch_frequency.iter().all(|f| (0.0..=1.0).contains(f)));
        let sum: f64 = r.patch_frequency.iter().sum();
        assert!((sum - r.mean_s).abs() < 1e-12);
        assert_eq!(r.by_s.iter().map(|b| b.count).sum::<usize>(), 30);
        assert_eq!(r, evaluate(&data.test, &state, &learned, ClassifierMode::HrOnly, &cfg, 9).unwrap());
    }
}
