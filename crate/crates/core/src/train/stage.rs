use std::path::Path;

use super::{append_metrics, evaluate, pretrain_classifiers, reinforce_step, stage_rng, EvalReport};
use super::{MetricRecord, Stage, StageConfig, TrainState};
use crate::baselines::MaskPolicy;
use crate::data::Dataset;
use crate::error::Result;
use crate::grid::NUM_PATCHES;
use crate::nn::AdamState;
use crate::policy::AlphaSchedule;
use crate::reward::RewardConfig;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub records: Vec<MetricRecord>,
    /// Epoch whose parameters the state holds on return.
    pub kept_epoch: usize,
    /// Validation metrics of the kept parameters.
    pub val: Option<EvalReport>,
}

/// Runs `cfg.epochs` epochs of the given stage. Classifier pretraining is
/// delegated to [`pretrain_classifiers`]; the policy stages require their
/// prerequisite stage and respect the freeze contracts: Pt updates only the
/// policy, Ft-1 and Ft-2 also update the HR classifier, the LR classifier is
/// never touched.
pub fn run_stage(data: &Dataset, state: &mut TrainState, cfg: &StageConfig, out: Option<&Path>) -> Result<StageReport> {
    cfg.check()?;
    state.check_order(cfg.stage)?;
    if cfg.stage == Stage::ClassifierPretrain {
        let r = pretrain_classifiers(data, state, cfg, out)?;
        if let Some(dir) = out {
            state.save(&dir.join("state"))?;
        }
        return Ok(StageReport { records: r.records, kept_epoch: cfg.epochs - 1, val: None });
    }

    let stage = cfg.stage;
    let reward_cfg = RewardConfig::new(cfg.sigma, NUM_PATCHES)?;
    let batches_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = AlphaSchedule::new(cfg.alpha_start, cfg.alpha_end, cfg.epochs as u64 * batches_per_epoch)?;
    let mut shuffle = stage_rng(cfg.seed, Stream::Shuffle, stage);
    let mut sampling = stage_rng(cfg.seed, Stream::Policy, stage);
    state.policy_opt = AdamState::new(&state.policy, cfg.learning_rate);
    state.hr_opt = AdamState::new(&state.hr, cfg.learning_rate);

    let ckpt = out.map(|d| d.join("checkpoints").join(stage.name()));
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, TrainState, EvalReport)> = None;
    let mut last_val = None;
    let mut stage_step = 0u64;
    for epoch in 0..cfg.epochs {
        let (mut reward_sum, mut s_sum, mut acc_sum, mut n) = (0.0, 0.0, 0.0, 0.0);
        for idx in data.train.batches(cfg.batch_size, &mut shuffle) {
            let batch = data.train.gather(&idx);
            let m = reinforce_step(&batch, state, cfg, schedule.at(stage_step), &mut sampling)?;
            stage_step += 1;
            let w = idx.len() as f64;
            reward_sum += m.mean_reward * w;
            s_sum += m.mean_s * w;
            acc_sum += m.accuracy * w;
            n += w;
        }
        let val = evaluate(
            &data.val,
            state,
            &MaskPolicy::Learned(&state.policy),
            stage.classifier_mode(),
            &reward_cfg,
            cfg.seed,
        )?;
        let epoch_records = vec![
            MetricRecord {
                stage: stage.name().into(),
                split: "train".into(),
                epoch,
                step: state.step,
                mean_reward: Some(reward_sum / n),
                mean_s: Some(s_sum / n),
                accuracy: acc_sum / n,
            },
            MetricRecord {
                stage: stage.name().into(),
                split: "val".into(),
                epoch,
                step: state.step,
                mean_reward: Some(val.mean_reward),
                mean_s: Some(val.mean_s),
                accuracy: val.accuracy,
            },
        ];
        if let Some(dir) = out {
            append_metrics(dir, &epoch_records)?;
        }
        if let Some(c) = &ckpt {
            state.save(&c.join("last"))?;
        }
        if best.as_ref().is_none_or(|b| val.mean_reward > b.0) {
            if let Some(c) = &ckpt {
                state.save(&c.join("best"))?;
            }
            best = Some((val.mean_reward, epoch, state.clone(), val.clone()));
        }
        records.extend(epoch_records);
        last_val = Some(val);
    }

    let mut kept_epoch = cfg.epochs - 1;
    let mut kept_val = last_val;
    if cfg.restore_best {
        if let Some((_, epoch, snapshot, val)) = best {
            state.policy = snapshot.policy;
            if stage.trains_hr_classifier() {
                state.hr = snapshot.hr;
            }
            kept_epoch = epoch;
            kept_val = Some(val);
        }
    }
    state.history.extend(records.iter().cloned());
    state.mark_completed(stage);
    if let Some(dir) = out {
        state.save(&dir.join("state"))?;
    }
    Ok(StageReport { records, kept_epoch, val: kept_val })
}
