//! Hard-positive augmentation: hide the patches the policy wants most, plus a
//! patch-aligned CutOut control that hides random patches.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grid::{apply_mask, PatchGrid, PatchMask, NUM_PATCHES};
use crate::nn::{Network, Tensor};
use crate::policy::{policy_forward_batch, ActionProbs};
use crate::rng::{Rng, Stream};
use crate::train::{classifier_accuracy, stage_rng, train_classifier, ClassifierInput, Stage, StageConfig, TrainState};

pub const MAX_HIDDEN: usize = 4;

/// Probability that a training sample is augmented in a given epoch.
pub const AUGMENT_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentMode {
    None,
    Cutout,
    HardPos,
}

impl AugmentMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMode::None),
            "cutout" => Ok(AugmentMode::Cutout),
            "hardpos" => Ok(AugmentMode::HardPos),
            other => Err(Error::InvalidArgument(format!("unknown augmentation mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::None => "none",
            AugmentMode::Cutout => "cutout",
            AugmentMode::HardPos => "hardpos",
        }
    }
}

/// IDs of the `m` largest probabilities, ties going to the lower ID.
pub fn top_patches(s: &ActionProbs, m: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..s.len()).collect();
    ids.sort_by(|&a, &b| s.0[b].total_cmp(&s.0[a]).then(a.cmp(&b)));
    ids.truncate(m);
    ids
}

/// Zeroes the given patches and leaves every other pixel as it was.
pub fn hide_patches(x_h: &Tensor, ids: &[usize], grid: &PatchGrid) -> Result<Tensor> {
    let mut bits = vec![true; NUM_PATCHES];
    for &id in ids {
        *bits.get_mut(id).ok_or_else(|| Error::InvalidArgument(format!("patch {id} outside grid")))? = false;
    }
    apply_mask(x_h, &PatchMask::new(bits), grid)
}

fn draw_m(rng: &mut Rng) -> usize {
    rng.random_range(1..=MAX_HIDDEN)
}

/// Hides the `M ~ U{1..4}` patches the policy rates highest.
pub fn hard_positive(x_h: &Tensor, s: &ActionProbs, rng: &mut Rng) -> Result<Tensor> {
    let grid = PatchGrid::for_image(x_h)?;
    let m = draw_m(rng);
    hide_patches(x_h, &top_patches(s, m), &grid)
}

/// Hides `M ~ U{1..4}` distinct patches chosen uniformly at random.
pub fn cutout_control(x_h: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let grid = PatchGrid::for_image(x_h)?;
    let m = draw_m(rng);
    let ids = sample(rng, NUM_PATCHES, m).into_vec();
    hide_patches(x_h, &ids, &grid)
}

/// Trains a fresh HR classifier with the given augmentation and returns its
/// accuracy on clean test images. The initialization and batch order match
/// classifier pretraining with the same config, so `None` reproduces it.
pub fn train_with_augmentation(
    data: &Dataset,
    policy: Option<&Network>,
    cfg: &StageConfig,
    mode: AugmentMode,
) -> Result<f64> {
    let init = TrainState::new(data.train.hr_shape(), data.train.lr_shape(), data.num_classes, cfg.seed);
    let mut net = init.hr;
    let mut shuffle = stage_rng(cfg.seed, Stream::Shuffle, Stage::ClassifierPretrain);
    let mut aug_rng = stage_rng(cfg.seed, Stream::Augment, Stage::ClassifierPretrain);
    match mode {
        AugmentMode::None => {
            train_classifier(&mut net, data, ClassifierInput::Hr, cfg, &mut shuffle, None)?;
        }
        AugmentMode::Cutout => {
            let mut f = |_: usize, x: Tensor, _: &mut Rng| -> Result<Tensor> {
                if aug_rng.random::<f64>() < AUGMENT_RATE {
                    cutout_control(&x, &mut aug_rng)
                } else {
                    Ok(x)
                }
            };
            train_classifier(&mut net, data, ClassifierInput::Hr, cfg, &mut shuffle, Some(&mut f))?;
        }
        AugmentMode::HardPos => {
            let policy = policy.ok_or_else(|| {
                Error::InvalidArgument("hard-positive augmentation needs a trained policy".into())
            })?;
            let all: Vec<usize> = (0..data.train.len()).collect();
            let s = policy_forward_batch(policy, &data.train.gather(&all).lr)?;
            let mut f = |i: usize, x: Tensor, _: &mut Rng| -> Result<Tensor> {
                if aug_rng.random::<f64>() < AUGMENT_RATE {
                    hard_positive(&x, &s[i], &mut aug_rng)
                } else {
                    Ok(x)
                }
            };
            train_classifier(&mut net, data, ClassifierInput::Hr, cfg, &mut shuffle, Some(&mut f))?;
        }
    }
    classifier_accuracy(&net, &data.test, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::extract_patches;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn image() -> Tensor {
        Tensor::from_fn(&[2, 16, 16], |i| 1.0 + i as f64)
    }

    fn zeroed(out: &Tensor) -> Vec<usize> {
        let grid = PatchGrid::for_image(out).unwrap();
        extract_patches(out, &grid)
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.sum_abs() == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn top_patches_breaks_ties_by_id() {
        let mut s = vec![0.1; 16];
        s[7] = 0.9;
        s[3] = 0.5;
        s[11] = 0.5;
        assert_eq!(top_patches(&ActionProbs(s.clone()), 1), vec![7]);
        assert_eq!(top_patches(&ActionProbs(s), 3), vec![7, 3, 11]);
        assert_eq!(top_patches(&ActionProbs(vec![0.2; 16]), 2), vec![0, 1]);
    }

    #[test]
    fn hides_exactly_the_top_patches() {
        let x = image();
        let grid = PatchGrid::for_image(&x).unwrap();
        let mut s = vec![0.05; 16];
        for (rank, id) in [9, 2, 14, 5].iter().enumerate() {
            s[*id] = 0.9 - 0.1 * rank as f64;
        }
        let out = hide_patches(&x, &top_patches(&ActionProbs(s), 4), &grid).unwrap();
        assert_eq!(zeroed(&out), vec![2, 5, 9, 14]);
    }

    #[test]
    fn cutout_frequencies_are_uniform() {
        let x = image();
        let mut rng = stream(1, Stream::Augment);
        let mut counts = [0usize; 16];
        let n = 10_000;
        for _ in 0..n {
            let z = zeroed(&cutout_control(&x, &mut rng).unwrap());
            assert!((1..=4).contains(&z.len()));
            z.iter().for_each(|&i| counts[i] += 1);
        }
        // Each patch is hidden with probability E[M] / 16 = 2.5 / 16 per draw.
        // Chi-square over the 16 binomial counts, 16 degrees of freedom,
        // critical value 39.25 at the 0.001 level.
        let p = 2.5 / 16.0;
        let e = n as f64 * p;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / (e * (1.0 - p))).sum();
        assert!(chi2 < 39.25, "{chi2} {counts:?}");
    }

    #[test]
    fn cutout_is_seeded() {
        let x = image();
        let a = cutout_control(&x, &mut stream(4, Stream::Augment)).unwrap();
        assert_eq!(a, cutout_control(&x, &mut stream(4, Stream::Augment)).unwrap());
    }

    proptest! {
        #[test]
        fn hard_positive_hides_m_top_patches_only(probs in prop::collection::vec(0.0f64..1.0, 16), seed in 0u64..1000) {
            let x = image();
            let s = ActionProbs(probs);
            let out = hard_positive(&x, &s, &mut stream(seed, Stream::Augment)).unwrap();
            let z = zeroed(&out);
            prop_assert!((1..=4).contains(&z.len()));
            let mut expected = top_patches(&s, z.len());
            expected.sort();
            prop_assert_eq!(&z, &expected);
            let grid = PatchGrid::for_image(&x).unwrap();
            let before = extract_patches(&x, &grid).unwrap();
            let after = extract_patches(&out, &grid).unwrap();
            for id in (0..16).filter(|i| !z.contains(i)) {
                prop_assert_eq!(&before[id], &after[id]);
            }
        }
    }
}
