use std::path::Path;

use super::{append_metrics, stage_rng, MetricRecord, Stage, StageConfig, TrainState};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::grid::downsample;
use crate::nn::{cross_entropy_batch, AdamState, Network, Tensor};
use crate::rng::{Rng, Stream};
use crate::train::classifier_accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierInput {
    Hr,
    Lr,
}

/// Per-sample image transform applied to the normalized HR image before it
/// reaches the classifier (and before downsampling for the LR stream).
pub type Transform<'a> = dyn FnMut(usize, Tensor, &mut Rng) -> Result<Tensor> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub hr_accuracy: f64,
    pub lr_accuracy: f64,
    pub records: Vec<MetricRecord>,
}

/// Cross-entropy training of one stream; returns validation accuracy per epoch.
pub fn train_classifier(
    net: &mut Network,
    data: &Dataset,
    input: ClassifierInput,
    cfg: &StageConfig,
    rng: &mut Rng,
    mut transform: Option<&mut Transform<'_>>,
) -> Result<Vec<f64>> {
    cfg.check()?;
    let mut opt = AdamState::new(net, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for idx in data.train.batches(cfg.batch_size, rng) {
            let batch = data.train.gather(&idx);
            let x = match transform.as_deref_mut() {
                None => match input {
                    ClassifierInput::Hr => batch.hr,
                    ClassifierInput::Lr => batch.lr,
                },
                Some(f) => {
                    let mut rows = Vec::with_capacity(idx.len());
                    for (k, &i) in idx.iter().enumerate() {
                        let hr = f(i, batch.hr.row(k), rng)?;
                        rows.push(match input {
                            ClassifierInput::Hr => hr,
                            ClassifierInput::Lr => downsample(&hr, data.ds)?,
                        });
                    }
                    Tensor::stack(&rows.iter().collect::<Vec<_>>())?
                }
            };
            let probs = net.forward(&x)?;
            let (loss, grad) = cross_entropy_batch(&probs, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss {loss} in epoch {epoch}")));
            }
            net.backward(&grad)?;
            opt.step(net)?;
        }
        history.push(classifier_accuracy(net, &data.val, input == ClassifierInput::Lr)?);
    }
    Ok(history)
}

/// Trains the HR stream on full HR images and the LR stream on LR images.
/// The policy is untouched.
pub fn pretrain_classifiers(
    data: &Dataset,
    state: &mut TrainState,
    cfg: &StageConfig,
    out: Option<&Path>,
) -> Result<PretrainReport> {
    if cfg.stage != Stage::ClassifierPretrain {
        return Err(Error::InvalidArgument(format!(
            "pretrain_classifiers called with stage {}",
            cfg.stage.name()
        )));
    }
    cfg.check()?;
    let mut rng = stage_rng(cfg.seed, Stream::Shuffle, cfg.stage);
    let mut aug_rng = stage_rng(cfg.seed, Stream::Augment, cfg.stage);
    let mut aug = |_: usize, x: Tensor, _: &mut Rng| -> Result<Tensor> { Ok(augment(&x, &mut aug_rng)) };

    let hr_hist = if cfg.augment {
        train_classifier(&mut state.hr, data, ClassifierInput::Hr, cfg, &mut rng, Some(&mut aug))?
    } else {
        train_classifier(&mut state.hr, data, ClassifierInput::Hr, cfg, &mut rng, None)?
    };
    if cfg.init_lr_from_hr {
        let hr = state.hr.clone();
        state.lr.copy_params_from(&hr)?;
    }
    let lr_hist = if cfg.augment {
        train_classifier(&mut state.lr, data, ClassifierInput::Lr, cfg, &mut rng, Some(&mut aug))?
    } else {
        train_classifier(&mut state.lr, data, ClassifierInput::Lr, cfg, &mut rng, None)?
    };

    let record = |split: &str, epoch: usize, acc: f64, s: f64| MetricRecord {
        stage: Stage::ClassifierPretrain.name().to_string(),
        split: split.to_string(),
        epoch,
        step: 0,
        mean_reward: None,
        mean_s: Some(s),
        accuracy: acc,
    };
    let mut records: Vec<MetricRecord> = hr_hist.iter().enumerate().map(|(e, &a)| record("val-hr", e, a, 16.0)).collect();
    records.extend(lr_hist.iter().enumerate().map(|(e, &a)| record("val-lr", e, a, 0.0)));
    state.history.extend(records.iter().cloned());
    state.mark_completed(Stage::ClassifierPretrain);
    if let Some(dir) = out {
        append_metrics(dir, &records)?;
        state.save(&dir.join("checkpoints").join(Stage::ClassifierPretrain.name()).join("last"))?;
    }
    Ok(PretrainReport {
        hr_accuracy: *hr_hist.last().expect("epochs >= 1"),
        lr_accuracy: *lr_hist.last().expect("epochs >= 1"),
        records,
    })
}
