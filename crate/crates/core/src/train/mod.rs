//! Training stages: classifier pretraining, policy pretraining (Pt) and the
//! two joint finetuning stages (Ft-1 with the HR stream, Ft-2 with both).

mod eval;
mod pretrain;
mod reinforce;
mod stage;

pub use eval::{classifier_accuracy, evaluate, EvalReport, SBucket};
pub use pretrain::{pretrain_classifiers, train_classifier, ClassifierInput, PretrainReport};
pub use reinforce::{reinforce_step, score_function_gradient, BatchMetrics};
pub(crate) use reinforce::explore;
pub use stage::{run_stage, StageReport};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierMode;
use crate::error::{Error, Result};
use crate::models;
use crate::nn::{AdamState, Network};
use crate::rng::{stream_at, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    ClassifierPretrain,
    Pt,
    Ft1,
    Ft2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::ClassifierPretrain => "pretrain",
            Stage::Pt => "pt",
            Stage::Ft1 => "ft1",
            Stage::Ft2 => "ft2",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "pretrain" => Ok(Stage::ClassifierPretrain),
            "pt" => Ok(Stage::Pt),
            "ft1" => Ok(Stage::Ft1),
            "ft2" => Ok(Stage::Ft2),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }

    /// Stage that must have completed before this one may run.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::ClassifierPretrain => None,
            Stage::Pt => Some(Stage::ClassifierPretrain),
            Stage::Ft1 | Stage::Ft2 => Some(Stage::Pt),
        }
    }

    pub fn classifier_mode(self) -> ClassifierMode {
        match self {
            Stage::Ft2 => ClassifierMode::TwoStream,
            _ => ClassifierMode::HrOnly,
        }
    }

    /// Whether the HR classifier is updated alongside the policy.
    pub fn trains_hr_classifier(self) -> bool {
        matches!(self, Stage::Ft1 | Stage::Ft2)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Which masked image the HR classifier is trained on during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierUpdate {
    Sampled,
    Greedy,
    Both,
}

impl ClassifierUpdate {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(ClassifierUpdate::Sampled),
            "greedy" => Ok(ClassifierUpdate::Greedy),
            "both" => Ok(ClassifierUpdate::Both),
            other => Err(Error::InvalidArgument(format!("unknown classifier update {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassifierUpdate::Sampled => "sampled",
            ClassifierUpdate::Greedy => "greedy",
            ClassifierUpdate::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sigma: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub seed: u64,
    /// Differentiate the likelihood of the temperature-scaled probabilities
    /// (true) or treat the unscaled output as the sampling distribution.
    pub grad_through_scaling: bool,
    pub classifier_update: ClassifierUpdate,
    /// Crop/flip augmentation during classifier pretraining.
    pub augment: bool,
    /// Start the LR classifier from the trained HR weights when shapes allow.
    pub init_lr_from_hr: bool,
    /// Keep the epoch with the best validation reward instead of the last one.
    pub restore_best: bool,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        StageConfig {
            stage,
            epochs: match stage {
                Stage::ClassifierPretrain => 50,
                Stage::Pt => 200,
                Stage::Ft1 | Stage::Ft2 => 100,
            },
            learning_rate: 1e-4,
            batch_size: 128,
            sigma: if matches!(stage, Stage::Ft1 | Stage::Ft2) { 5.0 } else { 0.5 },
            alpha_start: 0.7,
            alpha_end: 0.95,
            seed: 0,
            grad_through_scaling: true,
            classifier_update: ClassifierUpdate::Sampled,
            augment: false,
            init_lr_from_hr: false,
            restore_best: true,
        }
    }

    /// Every range violation, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let s = self.stage.name();
        let mut errs = Vec::new();
        if self.epochs < 1 {
            errs.push(format!("{s}.epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            errs.push(format!("{s}.batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errs.push(format!("{s}.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            errs.push(format!("{s}.sigma must be >= 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.alpha_start) || !(0.0..=1.0).contains(&self.alpha_end) {
            errs.push(format!(
                "{s}.alpha_start and alpha_end must lie in [0, 1], got {} and {}",
                self.alpha_start, self.alpha_end
            ));
        }
        if self.alpha_start > self.alpha_end {
            errs.push(format!(
                "{s}.alpha_start {} exceeds alpha_end {}",
                self.alpha_start, self.alpha_end
            ));
        }
        errs
    }

    pub(crate) fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub split: String,
    pub epoch: usize,
    pub step: u64,
    pub mean_reward: Option<f64>,
    #[serde(rename = "mean_S")]
    pub mean_s: Option<f64>,
    pub accuracy: f64,
}

/// Policy, both classifier streams and their optimizers.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: Network,
    pub hr: Network,
    pub lr: Network,
    pub policy_opt: AdamState,
    pub hr_opt: AdamState,
    pub lr_opt: AdamState,
    pub step: u64,
    pub history: Vec<MetricRecord>,
    pub completed: Vec<Stage>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    completed: Vec<Stage>,
    step: u64,
}

impl TrainState {
    /// Freshly initialized networks for `[C, H, W]` HR and `[C, h, w]` LR inputs.
    pub fn new(hr_shape: &[usize], lr_shape: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = stream_at(seed, Stream::Init as u64);
        let hr = models::classifier(hr_shape, classes, &mut rng);
        let lr = models::classifier(lr_shape, classes, &mut rng);
        let policy = models::policy(lr_shape, &mut rng);
        Self::from_networks(policy, hr, lr)
    }

    pub fn from_networks(policy: Network, hr: Network, lr: Network) -> Self {
        TrainState {
            policy_opt: AdamState::new(&policy, 1e-4),
            hr_opt: AdamState::new(&hr, 1e-4),
            lr_opt: AdamState::new(&lr, 1e-4),
            policy,
            hr,
            lr,
            step: 0,
            history: Vec::new(),
            completed: Vec::new(),
        }
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    pub(crate) fn mark_completed(&mut self, stage: Stage) {
        if !self.has_completed(stage) {
            self.completed.push(stage);
        }
    }

    pub(crate) fn check_order(&self, stage: Stage) -> Result<()> {
        match stage.prerequisite() {
            Some(pre) if !self.has_completed(pre) => Err(Error::StageOrder(format!(
                "stage {} requires {} to have completed",
                stage.name(),
                pre.name()
            ))),
            _ => Ok(()),
        }
    }

    /// Writes `policy.pdnn`, `hr.pdnn`, `lr.pdnn` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.policy.save(&dir.join("policy.pdnn"))?;
        self.hr.save(&dir.join("hr.pdnn"))?;
        self.lr.save(&dir.join("lr.pdnn"))?;
        let file = StateFile { completed: self.completed.clone(), step: self.step };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    /// Loads a state written by [`TrainState::save`]; optimizer moments start fresh.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("state.json"))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join("state.json").display())))?;
        let file: StateFile = serde_json::from_str(&text)?;
        let mut state = Self::from_networks(
            Network::load(&dir.join("policy.pdnn"))?,
            Network::load(&dir.join("hr.pdnn"))?,
            Network::load(&dir.join("lr.pdnn"))?,
        );
        state.completed = file.completed;
        state.step = file.step;
        Ok(state)
    }
}

/// RNG for one consumer within one stage.
pub fn stage_rng(seed: u64, stream: Stream, stage: Stage) -> Rng {
    stream_at(seed, (stream as u64) << 8 | stage.index())
}

/// Appends records to `metrics.ndjson` under `dir`.
pub fn append_metrics(dir: &Path, records: &[MetricRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("metrics.ndjson"))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
