//! Multi-stage pipelines: comparison tables and the sigma / ds sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{CurvePoint, MaskPolicy, TableRow};
use crate::classifier::ClassifierMode;
use crate::data::{Dataset, DatasetHandle, RawDataset};
use crate::error::Result;
use crate::grid::NUM_PATCHES;
use crate::reward::RewardConfig;
use crate::train::{evaluate, run_stage, Stage, StageConfig, TrainState};

/// Stage settings for a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub pretrain: StageConfig,
    pub pt: StageConfig,
    pub ft1: StageConfig,
    pub ft2: StageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            pretrain: StageConfig::defaults(Stage::ClassifierPretrain),
            pt: StageConfig::defaults(Stage::Pt),
            ft1: StageConfig::defaults(Stage::Ft1),
            ft2: StageConfig::defaults(Stage::Ft2),
        }
    }
}

impl PipelineConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::ClassifierPretrain => &self.pretrain,
            Stage::Pt => &self.pt,
            Stage::Ft1 => &self.ft1,
            Stage::Ft2 => &self.ft2,
        }
    }
}

/// Fresh networks, classifier pretraining, then Pt.
pub fn pretrain_and_pt(data: &Dataset, cfg: &PipelineConfig, out: Option<&Path>) -> Result<TrainState> {
    let mut state = TrainState::new(data.train.hr_shape(), data.train.lr_shape(), data.num_classes, cfg.seed);
    run_stage(data, &mut state, &cfg.pretrain, out)?;
    run_stage(data, &mut state, &cfg.pt, out)?;
    Ok(state)
}

/// One row per named mask source, in the given order.
pub fn compare(
    split: &DatasetHandle,
    state: &TrainState,
    policies: &[(String, MaskPolicy)],
    mode: ClassifierMode,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<Vec<TableRow>> {
    policies
        .iter()
        .map(|(name, p)| {
            let r = evaluate(split, state, p, mode, reward_cfg, seed)?;
            Ok(TableRow { policy: name.clone(), accuracy: r.accuracy, mean_s: r.mean_s })
        })
        .collect()
}

fn test_point(data: &Dataset, state: &TrainState, stage: &StageConfig, value: f64) -> Result<CurvePoint> {
    let reward_cfg = RewardConfig::new(stage.sigma, NUM_PATCHES)?;
    let r = evaluate(
        &data.test,
        state,
        &MaskPolicy::Learned(&state.policy),
        stage.stage.classifier_mode(),
        &reward_cfg,
        stage.seed,
    )?;
    Ok(CurvePoint { param_value: value, accuracy: r.accuracy, mean_s: r.mean_s })
}

/// Finetunes a copy of `base` (which must have completed Pt) with each sigma
/// and reports test accuracy and mean S.
pub fn sigma_sweep(data: &Dataset, base: &TrainState, ft: &StageConfig, sigmas: &[f64]) -> Result<Vec<CurvePoint>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let mut state = base.clone();
            let cfg = StageConfig { sigma, ..ft.clone() };
            run_stage(data, &mut state, &cfg, None)?;
            test_point(data, &state, &cfg, sigma)
        })
        .collect()
}

/// Rebuilds the LR images at each ratio and runs pretraining and Pt from scratch.
pub fn ds_sweep(raw: &RawDataset, cfg: &PipelineConfig, ratios: &[usize]) -> Result<Vec<CurvePoint>> {
    ratios
        .iter()
        .map(|&ds| {
            let data = Dataset::prepare(raw, ds)?;
            let state = pretrain_and_pt(&data, cfg, None)?;
            test_point(&data, &state, &cfg.pt, ds as f64)
        })
        .collect()
}
