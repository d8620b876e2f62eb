use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use patchdrop::bagnet::{bagnet_policy_stage, evaluate_full, evaluate_gated, train_bagnet, BagNetState};
use patchdrop::baselines::{
    calibrate_decay, curve_csv, table_csv, BaselineKind, BaselinePolicy, MaskPolicy, TableRow,
};
use patchdrop::config::{DataSource, RunConfig};
use patchdrop::data::cifar::load_cifar10;
use patchdrop::data::{generate_synthetic, load_synthetic, save_synthetic, Dataset, RawDataset};
use patchdrop::experiment::{compare, ds_sweep, sigma_sweep};
use patchdrop::grid::{PatchGrid, NUM_PATCHES};
use patchdrop::hardpos::{train_with_augmentation, AugmentMode};
use patchdrop::reward::RewardConfig;
use patchdrop::train::{append_metrics, evaluate, run_stage, MetricRecord, Stage, TrainState};

#[derive(Parser)]
#[command(name = "patchdrop", version, about = "Learned high-resolution patch acquisition")]
struct Cli {
    /// Config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for the normalized config, metrics, tables and checkpoints.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Learned,
    FixedH,
    FixedV,
    Stochastic,
    AllKeep,
    AllDrop,
}

impl PolicyArg {
    fn name(self) -> &'static str {
        match self {
            PolicyArg::Learned => "learned",
            PolicyArg::FixedH => "fixed-h",
            PolicyArg::FixedV => "fixed-v",
            PolicyArg::Stochastic => "stochastic",
            PolicyArg::AllKeep => "all-keep",
            PolicyArg::AllDrop => "all-drop",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Pt,
    Ft1,
    Ft2,
}

impl StageArg {
    fn stage(self) -> Stage {
        match self {
            StageArg::Pt => Stage::Pt,
            StageArg::Ft1 => Stage::Ft1,
            StageArg::Ft2 => Stage::Ft2,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FinetuneStage {
    Ft1,
    Ft2,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Sigma,
    Ds,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    None,
    Cutout,
    Hardpos,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into OUT/data.
    GenData,
    /// Train the HR and LR classifiers.
    Pretrain,
    /// Train the policy with the classifiers frozen.
    TrainPolicy,
    /// Jointly finetune the policy and the HR classifier.
    Finetune {
        #[arg(long, value_enum)]
        stage: FinetuneStage,
    },
    /// Evaluate one mask source on the test split.
    Eval {
        #[arg(long, value_enum, default_value = "learned")]
        policy: PolicyArg,
        /// Stage whose classifier mode and sigma are used.
        #[arg(long, value_enum, default_value = "pt")]
        stage: StageArg,
    },
    /// Evaluate every mask source on the test split.
    Compare {
        #[arg(long, value_enum, default_value = "pt")]
        stage: StageArg,
    },
    /// Mean S and accuracy against sigma or the downsampling ratio.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
    },
    /// Train an HR classifier with the chosen augmentation; report clean test accuracy.
    AugmentTrain {
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Train a BagNet on all patches, then a policy that gates it.
    Bagnet,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::TrainPolicy => "train-policy",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Compare { .. } => "compare",
            Command::Sweep { .. } => "sweep",
            Command::AugmentTrain { .. } => "augment-train",
            Command::Bagnet => "bagnet",
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = cli.out.as_path();
    prepare_run_dir(out, &cfg, cli.command.name())?;

    match cli.command {
        Command::GenData => {
            if cfg.data.source != DataSource::Synthetic {
                bail!("gen-data only produces the synthetic dataset");
            }
            let raw = generate_synthetic(&cfg.synthetic)?;
            let dir = out.join("data");
            save_synthetic(&raw, &cfg.synthetic, &dir)?;
            report(&json!({
                "data": dir,
                "train": raw.train.len(),
                "val": raw.val.len(),
                "test": raw.test.len(),
            }));
        }
        Command::Pretrain => {
            let data = load_data(&cfg)?;
            let mut state =
                TrainState::new(data.train.hr_shape(), data.train.lr_shape(), data.num_classes, cfg.seed);
            let r = run_stage(&data, &mut state, &cfg.pretrain, Some(out))?;
            report(&json!({ "stage": "pretrain", "records": r.records }));
        }
        Command::TrainPolicy => policy_stage(&cfg, out, Stage::Pt)?,
        Command::Finetune { stage } => {
            let stage = match stage {
                FinetuneStage::Ft1 => Stage::Ft1,
                FinetuneStage::Ft2 => Stage::Ft2,
            };
            policy_stage(&cfg, out, stage)?;
        }
        Command::Eval { policy, stage } => {
            let data = load_data(&cfg)?;
            let state = load_state(out)?;
            let stage_cfg = cfg.stage(stage.stage());
            let reward_cfg = RewardConfig::new(stage_cfg.sigma, NUM_PATCHES)?;
            let source = mask_policy(policy, &cfg, &state, &data)?;
            let mode = stage.stage().classifier_mode();
            let r = evaluate(&data.test, &state, &source, mode, &reward_cfg, cfg.seed)?;
            let row = TableRow { policy: policy.name().into(), accuracy: r.accuracy, mean_s: r.mean_s };
            fs::write(out.join(format!("eval_{}.csv", policy.name())), table_csv(&[row]))?;
            fs::write(out.join(format!("eval_{}.json", policy.name())), serde_json::to_string_pretty(&r)?)?;
            append_metrics(
                out,
                &[MetricRecord {
                    stage: format!("eval-{}-{}", stage.stage().name(), policy.name()),
                    split: "test".into(),
                    epoch: 0,
                    step: state.step,
                    mean_reward: Some(r.mean_reward),
                    mean_s: Some(r.mean_s),
                    accuracy: r.accuracy,
                }],
            )?;
            report(&json!({ "policy": policy.name(), "accuracy": r.accuracy, "mean_S": r.mean_s, "mean_reward": r.mean_reward }));
        }
        Command::Compare { stage } => {
            let data = load_data(&cfg)?;
            let state = load_state(out)?;
            let reward_cfg = RewardConfig::new(cfg.stage(stage.stage()).sigma, NUM_PATCHES)?;
            let mut sources = Vec::new();
            for p in PolicyArg::value_variants() {
                if *p == PolicyArg::Learned && !state.has_completed(Stage::Pt) {
                    continue;
                }
                sources.push((p.name().to_string(), mask_policy(*p, &cfg, &state, &data)?));
            }
            let rows = compare(&data.test, &state, &sources, stage.stage().classifier_mode(), &reward_cfg, cfg.seed)?;
            fs::write(out.join("compare.csv"), table_csv(&rows))?;
            report(&serde_json::to_value(&rows)?);
        }
        Command::Sweep { param } => {
            let (name, points) = match param {
                SweepParam::Sigma => {
                    let data = load_data(&cfg)?;
                    let base = load_state(out)?;
                    ("sigma", sigma_sweep(&data, &base, cfg.stage(cfg.sweep.stage), &cfg.sweep.sigmas)?)
                }
                SweepParam::Ds => ("ds", ds_sweep(&load_raw(&cfg)?, &cfg.pipeline(), &cfg.sweep.ratios)?),
            };
            fs::write(out.join(format!("sweep_{name}.csv")), curve_csv(&points))?;
            report(&serde_json::to_value(&points)?);
        }
        Command::AugmentTrain { mode } => {
            let data = load_data(&cfg)?;
            let mode = match mode {
                ModeArg::None => AugmentMode::None,
                ModeArg::Cutout => AugmentMode::Cutout,
                ModeArg::Hardpos => AugmentMode::HardPos,
            };
            let state = if mode == AugmentMode::HardPos {
                let s = load_state(out)?;
                if !s.has_completed(Stage::Pt) {
                    bail!("hard-positive augmentation needs a policy; run train-policy first");
                }
                Some(s)
            } else {
                None
            };
            let acc = train_with_augmentation(&data, state.as_ref().map(|s| &s.policy), &cfg.pretrain, mode)?;
            let result = json!({ "mode": mode.name(), "test_accuracy": acc });
            fs::write(out.join(format!("augment_{}.json", mode.name())), serde_json::to_string_pretty(&result)?)?;
            report(&result);
        }
        Command::Bagnet => {
            let data = load_data(&cfg)?;
            let mut state = BagNetState::new(&data, cfg.bagnet.aggregation, cfg.seed)?;
            train_bagnet(&data, &mut state, &cfg.pretrain)?;
            let full = evaluate_full(&data.test, &state)?;
            let mut records = bagnet_policy_stage(&data, &mut state, &cfg.pt)?;
            records.extend(bagnet_policy_stage(&data, &mut state, &cfg.ft1)?);
            append_metrics(out, &records)?;
            let gated = evaluate_gated(&data.test, &state, &RewardConfig::new(cfg.ft1.sigma, NUM_PATCHES)?)?;
            let dir = out.join("checkpoints").join("bagnet");
            fs::create_dir_all(&dir)?;
            state.patch_net.save(&dir.join("patch.pdnn"))?;
            state.policy.save(&dir.join("policy.pdnn"))?;
            let rows = [
                TableRow { policy: "bagnet-full".into(), accuracy: full, mean_s: NUM_PATCHES as f64 },
                TableRow { policy: "bagnet-gated".into(), accuracy: gated.accuracy, mean_s: gated.mean_s },
            ];
            fs::write(out.join("bagnet.csv"), table_csv(&rows))?;
            report(&serde_json::to_value(rows)?);
        }
    }
    Ok(())
}

fn report(v: &serde_json::Value) {
    println!("{v}");
}

/// Writes the normalized config and records the command in the manifest.
/// A run directory is tied to one seed.
fn prepare_run_dir(out: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("manifest.json");
    let mut manifest = if path.exists() {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)
            .with_context(|| format!("reading {}", path.display()))?;
        if m["seed"] != json!(cfg.seed) {
            bail!("{} was created with seed {}, not {}", out.display(), m["seed"], cfg.seed);
        }
        m
    } else {
        json!({
            "seed": cfg.seed,
            "code_version": env!("CARGO_PKG_VERSION"),
            "commands": [],
        })
    };
    manifest["commands"]
        .as_array_mut()
        .context("manifest commands must be a list")?
        .push(json!(command));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out.join("config.toml"), cfg.to_text())?;
    Ok(())
}

fn load_raw(cfg: &RunConfig) -> Result<RawDataset> {
    Ok(match cfg.data.source {
        DataSource::Synthetic if cfg.data.dir.is_empty() => generate_synthetic(&cfg.synthetic)?,
        DataSource::Synthetic => load_synthetic(Path::new(&cfg.data.dir))?.0,
        DataSource::Cifar10 => load_cifar10(Path::new(&cfg.data.dir), cfg.data.val_count)?,
    })
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset::prepare(&load_raw(cfg)?, cfg.data.ds)?)
}

fn load_state(out: &Path) -> Result<TrainState> {
    TrainState::load(&out.join("state"))
        .with_context(|| format!("no trained state in {}; run pretrain first", out.display()))
}

fn policy_stage(cfg: &RunConfig, out: &Path, stage: Stage) -> Result<()> {
    let data = load_data(cfg)?;
    let mut state = load_state(out)?;
    let r = run_stage(&data, &mut state, cfg.stage(stage), Some(out))?;
    report(&json!({ "stage": stage.name(), "kept_epoch": r.kept_epoch, "val": r.val }));
    Ok(())
}

fn mask_policy<'a>(p: PolicyArg, cfg: &RunConfig, state: &'a TrainState, data: &Dataset) -> Result<MaskPolicy<'a>> {
    let shape = data.test.hr_shape();
    Ok(match p {
        PolicyArg::Learned => {
            if !state.has_completed(Stage::Pt) {
                bail!("the learned policy is untrained; run train-policy first");
            }
            MaskPolicy::Learned(&state.policy)
        }
        PolicyArg::FixedH => MaskPolicy::Baseline(BaselinePolicy::fixed(BaselineKind::FixedH, cfg.compare.budget)?),
        PolicyArg::FixedV => MaskPolicy::Baseline(BaselinePolicy::fixed(BaselineKind::FixedV, cfg.compare.budget)?),
        PolicyArg::Stochastic => {
            let grid = PatchGrid::new(shape[1], shape[2])?;
            MaskPolicy::Baseline(BaselinePolicy::stochastic(calibrate_decay(cfg.compare.stochastic_mean_s, &grid)?)?)
        }
        PolicyArg::AllKeep => MaskPolicy::Baseline(BaselinePolicy::constant(true)),
        PolicyArg::AllDrop => MaskPolicy::Baseline(BaselinePolicy::constant(false)),
    })
}
