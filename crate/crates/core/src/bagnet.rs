//! Bag-of-local-features classifier: a shared patch network scores each patch
//! independently and the class evidence is summed. Gating with the policy
//! skips the patches it does not select.

use serde::{Deserialize, Serialize};

use crate::classifier::{predict, ClassProbs};
use crate::data::{Dataset, DatasetHandle};
use crate::error::{Error, Result};
use crate::grid::{extract_patches, PatchGrid, PatchMask, NUM_PATCHES};
use crate::models;
use crate::nn::{AdamState, Network, Tensor};
use crate::policy::{greedy_action, policy_forward_batch, AlphaSchedule};
use crate::reward::{advantage, reward, RewardConfig};
use crate::rng::{stream_at, Rng, Stream};
use crate::train::{explore, stage_rng, MetricRecord, Stage, StageConfig};

/// How per-patch outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BagAggregation {
    /// Sum logits, then softmax.
    Logits,
    /// Average per-patch softmax outputs.
    Probabilities,
}

impl BagAggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(BagAggregation::Logits),
            "probabilities" => Ok(BagAggregation::Probabilities),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Combines the logit rows of the selected patches; no rows gives the uniform distribution.
fn aggregate<'a>(rows: impl Iterator<Item = &'a [f64]>, classes: usize, agg: BagAggregation) -> ClassProbs {
    let mut acc = vec![0.0; classes];
    let mut count = 0usize;
    for row in rows {
        let contrib = match agg {
            BagAggregation::Logits => row.to_vec(),
            BagAggregation::Probabilities => softmax(row),
        };
        acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c);
        count += 1;
    }
    if count == 0 {
        return ClassProbs::uniform(classes);
    }
    match agg {
        BagAggregation::Logits => ClassProbs(softmax(&acc)),
        BagAggregation::Probabilities => ClassProbs(acc.into_iter().map(|a| a / count as f64).collect()),
    }
}

/// Gated classification of one `[C, H, W]` image: only selected patches are run.
pub fn bagnet_classify(
    patch_net: &Network,
    x_h: &Tensor,
    mask: &PatchMask,
    grid: &PatchGrid,
    agg: BagAggregation,
) -> Result<ClassProbs> {
    if mask.len() != NUM_PATCHES {
        return Err(Error::InvalidArgument(format!("mask has {} bits", mask.len())));
    }
    let classes = patch_net.output_shape()[0];
    let ids = mask.kept_ids();
    if ids.is_empty() {
        return Ok(ClassProbs::uniform(classes));
    }
    let patches = extract_patches(x_h, grid)?;
    let selected: Vec<&Tensor> = ids.iter().map(|&i| &patches[i]).collect();
    let logits = patch_net.infer(&Tensor::stack(&selected)?)?;
    Ok(aggregate((0..logits.rows()).map(|r| logits.row_slice(r)), classes, agg))
}

/// Patches processed for a mask.
pub fn bagnet_cost(mask: &PatchMask) -> usize {
    mask.count()
}

/// All patches of a batch `[B, C, H, W]` as `[16 B, C, H/4, W/4]`, image-major.
fn patch_batch(hr: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let mut all = Vec::with_capacity(hr.rows() * NUM_PATCHES);
    for i in 0..hr.rows() {
        all.extend(extract_patches(&hr.row(i), grid)?);
    }
    Tensor::stack(&all.iter().collect::<Vec<_>>())
}

/// Ungated evaluation of every patch of every image in one batched pass.
pub fn bagnet_full(patch_net: &Network, hr: &Tensor, grid: &PatchGrid, agg: BagAggregation) -> Result<Vec<ClassProbs>> {
    let logits = patch_net.infer(&patch_batch(hr, grid)?)?;
    let classes = patch_net.output_shape()[0];
    Ok((0..hr.rows())
        .map(|i| aggregate((0..NUM_PATCHES).map(|k| logits.row_slice(i * NUM_PATCHES + k)), classes, agg))
        .collect())
}

/// Mean cross-entropy of the gated outputs and its gradient with respect to
/// the per-patch logits `[16 B, N]`. Unselected patches get zero gradient.
pub(crate) fn bag_loss_grad(
    logits: &Tensor,
    masks: &[PatchMask],
    labels: &[usize],
    agg: BagAggregation,
) -> Result<(f64, Tensor)> {
    let classes = logits.shape()[1];
    let b = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, (mask, &y)) in masks.iter().zip(labels).enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("label {y} with {classes} classes")));
        }
        let ids = mask.kept_ids();
        let rows = |k: usize| i * NUM_PATCHES + k;
        let p = aggregate(ids.iter().map(|&k| logits.row_slice(rows(k))), classes, agg);
        let py = p.0[y].max(1e-12);
        loss -= py.ln();
        let s = ids.len() as f64;
        for &k in &ids {
            let g = &mut grad.data_mut()[rows(k) * classes..(rows(k) + 1) * classes];
            match agg {
                BagAggregation::Logits => {
                    for (c, gc) in g.iter_mut().enumerate() {
                        *gc = (p.0[c] - (c == y) as u8 as f64) / b;
                    }
                }
                BagAggregation::Probabilities => {
                    let q = softmax(logits.row_slice(rows(k)));
                    for (c, gc) in g.iter_mut().enumerate() {
                        *gc = -q[y] * ((c == y) as u8 as f64 - q[c]) / (s * py * b);
                    }
                }
            }
        }
    }
    Ok((loss / b, grad))
}

fn bag_step(
    net: &mut Network,
    opt: &mut AdamState,
    patches: &Tensor,
    masks: &[PatchMask],
    labels: &[usize],
    agg: BagAggregation,
) -> Result<()> {
    let logits = net.forward(patches)?;
    let (loss, grad) = bag_loss_grad(&logits, masks, labels, agg)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("BagNet loss {loss}")));
    }
    net.backward(&grad)?;
    opt.step(net)
}

/// Patch network plus the policy that gates it.
#[derive(Debug, Clone)]
pub struct BagNetState {
    pub patch_net: Network,
    pub policy: Network,
    pub aggregation: BagAggregation,
}

impl BagNetState {
    pub fn new(data: &Dataset, aggregation: BagAggregation, seed: u64) -> Result<Self> {
        let hr = data.train.hr_shape();
        let grid = PatchGrid::new(hr[1], hr[2])?;
        let mut rng = stream_at(seed, (Stream::Init as u64) << 8 | 0x42);
        Ok(BagNetState {
            patch_net: models::patch_logits(&[hr[0], grid.patch_height(), grid.patch_width()], data.num_classes, &mut rng),
            policy: models::policy(data.train.lr_shape(), &mut rng),
            aggregation,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BagEval {
    pub accuracy: f64,
    pub mean_s: f64,
    pub mean_reward: f64,
}

/// Ungated accuracy over all 16 patches.
pub fn evaluate_full(split: &DatasetHandle, state: &BagNetState) -> Result<f64> {
    let shape = split.hr_shape();
    let grid = PatchGrid::new(shape[1], shape[2])?;
    let mut correct = 0usize;
    for idx in split.sequential_batches(64) {
        let batch = split.gather(&idx);
        let probs = bagnet_full(&state.patch_net, &batch.hr, &grid, state.aggregation)?;
        correct += probs.iter().zip(&batch.labels).filter(|(p, &y)| predict(p).class == y).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Gated accuracy and cost under the greedy policy.
pub fn evaluate_gated(split: &DatasetHandle, state: &BagNetState, reward_cfg: &RewardConfig) -> Result<BagEval> {
    let shape = split.hr_shape();
    let grid = PatchGrid::new(shape[1], shape[2])?;
    let (mut correct, mut cost, mut total) = (0usize, 0usize, 0.0);
    for idx in split.sequential_batches(256) {
        let batch = split.gather(&idx);
        let masks: Vec<PatchMask> = policy_forward_batch(&state.policy, &batch.lr)?.iter().map(greedy_action).collect();
        for (i, mask) in masks.iter().enumerate() {
            let p = bagnet_classify(&state.patch_net, &batch.hr.row(i), mask, &grid, state.aggregation)?;
            let out = reward(mask, &predict(&p), batch.labels[i], reward_cfg);
            correct += out.correct as usize;
            cost += bagnet_cost(mask);
            total += out.reward;
        }
    }
    let n = split.len() as f64;
    Ok(BagEval { accuracy: correct as f64 / n, mean_s: cost as f64 / n, mean_reward: total / n })
}

/// Trains the patch network on all patches; returns validation accuracy per epoch.
pub fn train_bagnet(data: &Dataset, state: &mut BagNetState, cfg: &StageConfig) -> Result<Vec<f64>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let shape = data.train.hr_shape();
    let grid = PatchGrid::new(shape[1], shape[2])?;
    let mut rng = stage_rng(cfg.seed, Stream::Shuffle, Stage::ClassifierPretrain);
    let mut opt = AdamState::new(&state.patch_net, cfg.learning_rate);
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        for idx in data.train.batches(cfg.batch_size, &mut rng) {
            let batch = data.train.gather(&idx);
            let masks = vec![PatchMask::all(NUM_PATCHES, true); idx.len()];
            bag_step(&mut state.patch_net, &mut opt, &patch_batch(&batch.hr, &grid)?, &masks, &batch.labels, state.aggregation)?;
        }
        history.push(evaluate_full(&data.val, state)?);
    }
    Ok(history)
}

/// Policy training against the BagNet: `Stage::Pt` keeps the patch network
/// frozen, `Stage::Ft1` also finetunes it on the sampled patches. The epoch
/// with the best validation reward is kept.
pub fn bagnet_policy_stage(data: &Dataset, state: &mut BagNetState, cfg: &StageConfig) -> Result<Vec<MetricRecord>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if !matches!(cfg.stage, Stage::Pt | Stage::Ft1) {
        return Err(Error::InvalidArgument(format!("BagNet has no {} stage", cfg.stage.name())));
    }
    let train_patches = cfg.stage == Stage::Ft1;
    let shape = data.train.hr_shape();
    let grid = PatchGrid::new(shape[1], shape[2])?;
    let reward_cfg = RewardConfig::new(cfg.sigma, NUM_PATCHES)?;
    let classes = data.num_classes;
    let per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = AlphaSchedule::new(cfg.alpha_start, cfg.alpha_end, cfg.epochs as u64 * per_epoch)?;
    let mut shuffle: Rng = stage_rng(cfg.seed ^ 0xba9, Stream::Shuffle, cfg.stage);
    let mut sampling: Rng = stage_rng(cfg.seed ^ 0xba9, Stream::Policy, cfg.stage);
    let mut policy_opt = AdamState::new(&state.policy, cfg.learning_rate);
    let mut patch_opt = AdamState::new(&state.patch_net, cfg.learning_rate);
    let mut step = 0u64;
    let mut records = Vec::new();
    let mut best: Option<(f64, BagNetState)> = None;
    for epoch in 0..cfg.epochs {
        for idx in data.train.batches(cfg.batch_size, &mut shuffle) {
            let batch = data.train.gather(&idx);
            let patches = patch_batch(&batch.hr, &grid)?;
            let s_out = state.policy.forward(&batch.lr)?;
            let ex = explore(&s_out, schedule.at(step), cfg.grad_through_scaling, &mut sampling)?;
            step += 1;
            // Patch logits do not depend on the mask, so one pass serves both actions.
            let logits = state.patch_net.infer(&patches)?;
            let rows = |i: usize, m: &PatchMask| -> Vec<usize> { m.kept_ids().iter().map(|k| i * NUM_PATCHES + k).collect() };
            let mut advantages = Vec::with_capacity(idx.len());
            for (i, &y) in batch.labels.iter().enumerate() {
                let ps = aggregate(rows(i, &ex.sampled[i]).into_iter().map(|r| logits.row_slice(r)), classes, state.aggregation);
                let pg = aggregate(rows(i, &ex.greedy[i]).into_iter().map(|r| logits.row_slice(r)), classes, state.aggregation);
                let rs = reward(&ex.sampled[i], &predict(&ps), y, &reward_cfg);
                let rg = reward(&ex.greedy[i], &predict(&pg), y, &reward_cfg);
                advantages.push(advantage(&rs, &rg));
            }
            ex.apply(&mut state.policy, &mut policy_opt, &advantages)?;
            if train_patches {
                bag_step(&mut state.patch_net, &mut patch_opt, &patches, &ex.sampled, &batch.labels, state.aggregation)?;
            }
        }
        let val = evaluate_gated(&data.val, state, &reward_cfg)?;
        records.push(MetricRecord {
            stage: format!("bagnet-{}", cfg.stage.name()),
            split: "val".into(),
            epoch,
            step,
            mean_reward: Some(val.mean_reward),
            mean_s: Some(val.mean_s),
            accuracy: val.accuracy,
        });
        if best.as_ref().is_none_or(|b| val.mean_reward > b.0) {
            best = Some((val.mean_reward, state.clone()));
        }
    }
    if cfg.restore_best {
        if let Some((_, snapshot)) = best {
            *state = snapshot;
        }
    }
    Ok(records)
}
