//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers (a subset of TOML). Validation collects every problem before
//! failing, and [`RunConfig::to_text`] echoes the normalized result.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bagnet::BagAggregation;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::experiment::PipelineConfig;
use crate::grid::NUM_PATCHES;
use crate::train::{ClassifierUpdate, Stage, StageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 batch directory, or a saved synthetic dataset. Empty means
    /// regenerate the synthetic task from `[synthetic]`.
    pub dir: String,
    /// HR to LR downsampling ratio.
    pub ds: usize,
    /// Training records held out for validation (CIFAR-10 only).
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Synthetic, dir: String::new(), ds: 4, val_count: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Patch budget of the fixed-order baselines.
    pub budget: usize,
    /// Expected number of patches of the stochastic baseline.
    pub stochastic_mean_s: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { budget: 4, stochastic_mean_s: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub ratios: Vec<usize>,
    /// Finetuning stage used by the sigma sweep.
    pub stage: Stage,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { sigmas: vec![0.5, 2.0, 5.0, 10.0], ratios: vec![2, 4, 8], stage: Stage::Ft1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagnetConfig {
    pub aggregation: BagAggregation,
}

impl Default for BagnetConfig {
    fn default() -> Self {
        BagnetConfig { aggregation: BagAggregation::Logits }
    }
}

/// Everything a CLI run needs. `seed` is the single root seed; it is copied
/// into every stage and into the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub pretrain: StageConfig,
    pub pt: StageConfig,
    pub ft1: StageConfig,
    pub ft2: StageConfig,
    pub compare: CompareConfig,
    pub sweep: SweepConfig,
    pub bagnet: BagnetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            pretrain: p.pretrain,
            pt: p.pt,
            ft1: p.ft1,
            ft2: p.ft2,
            compare: CompareConfig::default(),
            sweep: SweepConfig::default(),
            bagnet: BagnetConfig::default(),
        }
    }
}

const STAGE_SECTIONS: [(&str, Stage); 4] = [
    ("pretrain", Stage::ClassifierPretrain),
    ("pt", Stage::Pt),
    ("ft1", Stage::Ft1),
    ("ft2", Stage::Ft2),
];

/// Pulls typed values out of one section, recording every problem.
struct Section<'a> {
    name: String,
    table: Table,
    errs: &'a mut Vec<String>,
}

impl Section<'_> {
    fn key(&self, k: &str) -> String {
        if self.name.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.name)
        }
    }

    fn wrong(&mut self, k: &str, want: &str, v: &Value) {
        let msg = format!("{} must be {want}, got {v}", self.key(k));
        self.errs.push(msg);
    }

    fn f64(&mut self, k: &str, slot: &mut f64) {
        match self.table.remove(k) {
            None => {}
            Some(Value::Float(f)) => *slot = f,
            Some(Value::Integer(i)) => *slot = i as f64,
            Some(v) => self.wrong(k, "a number", &v),
        }
    }

    fn uint(v: &Value) -> Option<u64> {
        match v {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => None,
        }
    }

    fn u64(&mut self, k: &str, slot: &mut u64) {
        if let Some(v) = self.table.remove(k) {
            match Self::uint(&v) {
                Some(n) => *slot = n,
                None => self.wrong(k, "a non-negative integer", &v),
            }
        }
    }

    fn usize(&mut self, k: &str, slot: &mut usize) {
        let mut n = *slot as u64;
        self.u64(k, &mut n);
        *slot = n as usize;
    }

    fn bool(&mut self, k: &str, slot: &mut bool) {
        match self.table.remove(k) {
            None => {}
            Some(Value::Boolean(b)) => *slot = b,
            Some(v) => self.wrong(k, "true or false", &v),
        }
    }

    fn string(&mut self, k: &str) -> Option<String> {
        match self.table.remove(k) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(v) => {
                self.wrong(k, "a quoted string", &v);
                None
            }
        }
    }

    fn choice<T>(&mut self, k: &str, slot: &mut T, parse: impl Fn(&str) -> Result<T>) {
        if let Some(s) = self.string(k) {
            match parse(&s) {
                Ok(v) => *slot = v,
                Err(e) => {
                    let msg = format!("{}: {e}", self.key(k));
                    self.errs.push(msg);
                }
            }
        }
    }

    fn list<T>(&mut self, k: &str, slot: &mut Vec<T>, want: &str, item: impl Fn(&Value) -> Option<T>) {
        match self.table.remove(k) {
            None => {}
            Some(Value::Array(a)) => match a.iter().map(&item).collect::<Option<Vec<T>>>() {
                Some(v) => *slot = v,
                None => self.wrong(k, want, &Value::Array(a)),
            },
            Some(v) => self.wrong(k, want, &v),
        }
    }

    fn finish(self) {
        for k in self.table.keys() {
            let msg = format!("unknown key {}", self.key(k));
            self.errs.push(msg);
        }
    }
}

fn stage_section(sec: &mut Section, cfg: &mut StageConfig) {
    sec.usize("epochs", &mut cfg.epochs);
    sec.f64("learning_rate", &mut cfg.learning_rate);
    sec.usize("batch_size", &mut cfg.batch_size);
    sec.f64("sigma", &mut cfg.sigma);
    sec.f64("alpha_start", &mut cfg.alpha_start);
    sec.f64("alpha_end", &mut cfg.alpha_end);
    sec.bool("grad_through_scaling", &mut cfg.grad_through_scaling);
    sec.choice("classifier_update", &mut cfg.classifier_update, ClassifierUpdate::parse);
    sec.bool("augment", &mut cfg.augment);
    sec.bool("init_lr_from_hr", &mut cfg.init_lr_from_hr);
    sec.bool("restore_best", &mut cfg.restore_best);
}

impl RunConfig {
    /// Parses and validates config text. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();

        let mut sections = Vec::new();
        for (name, v) in root.clone() {
            if let Value::Table(t) = v {
                root.remove(&name);
                sections.push((name, t));
            }
        }
        let mut top = Section { name: String::new(), table: root, errs: &mut errs };
        top.u64("seed", &mut cfg.seed);
        top.finish();

        for (name, table) in sections {
            let mut sec = Section { name: name.clone(), table, errs: &mut errs };
            match name.as_str() {
                "data" => {
                    let d = &mut cfg.data;
                    sec.choice("source", &mut d.source, |s| match s {
                        "synthetic" => Ok(DataSource::Synthetic),
                        "cifar10" => Ok(DataSource::Cifar10),
                        other => Err(Error::InvalidArgument(format!("unknown data source {other:?}"))),
                    });
                    if let Some(dir) = sec.string("dir") {
                        d.dir = dir;
                    }
                    sec.usize("ds", &mut d.ds);
                    sec.usize("val_count", &mut d.val_count);
                }
                "synthetic" => {
                    let s = &mut cfg.synthetic;
                    sec.usize("channels", &mut s.channels);
                    sec.usize("height", &mut s.height);
                    sec.usize("width", &mut s.width);
                    sec.usize("num_classes", &mut s.num_classes);
                    sec.list("informative", &mut s.informative, "a list of patch IDs", |v| {
                        Section::uint(v).map(|n| n as usize)
                    });
                    sec.f64("amplitude", &mut s.amplitude);
                    sec.f64("noise", &mut s.noise);
                    sec.usize("train", &mut s.train);
                    sec.usize("val", &mut s.val);
                    sec.usize("test", &mut s.test);
                    sec.f64("label_noise", &mut s.label_noise);
                }
                "compare" => {
                    sec.usize("budget", &mut cfg.compare.budget);
                    sec.f64("stochastic_mean_s", &mut cfg.compare.stochastic_mean_s);
                }
                "sweep" => {
                    sec.list("sigmas", &mut cfg.sweep.sigmas, "a list of numbers", |v| match v {
                        Value::Float(f) => Some(*f),
                        Value::Integer(i) => Some(*i as f64),
                        _ => None,
                    });
                    sec.list("ratios", &mut cfg.sweep.ratios, "a list of positive integers", |v| {
                        Section::uint(v).map(|n| n as usize)
                    });
                    sec.choice("stage", &mut cfg.sweep.stage, Stage::parse);
                }
                "bagnet" => {
                    sec.choice("aggregation", &mut cfg.bagnet.aggregation, BagAggregation::parse);
                }
                other => match STAGE_SECTIONS.iter().find(|(n, _)| *n == other) {
                    Some(&(_, stage)) => {
                        let slot = match stage {
                            Stage::ClassifierPretrain => &mut cfg.pretrain,
                            Stage::Pt => &mut cfg.pt,
                            Stage::Ft1 => &mut cfg.ft1,
                            Stage::Ft2 => &mut cfg.ft2,
                        };
                        stage_section(&mut sec, slot);
                    }
                    None => {
                        sec.errs.push(format!("unknown section [{other}]"));
                        sec.table.clear();
                    }
                },
            }
            sec.finish();
        }

        cfg.set_seed(cfg.seed);
        errs.extend(cfg.validate());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        RunConfig::parse(&text)
    }

    /// Sets the root seed and propagates it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synthetic.seed = seed;
        for s in [&mut self.pretrain, &mut self.pt, &mut self.ft1, &mut self.ft2] {
            s.seed = seed;
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            pretrain: self.pretrain.clone(),
            pt: self.pt.clone(),
            ft1: self.ft1.clone(),
            ft2: self.ft2.clone(),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::ClassifierPretrain => &self.pretrain,
            Stage::Pt => &self.pt,
            Stage::Ft1 => &self.ft1,
            Stage::Ft2 => &self.ft2,
        }
    }

    /// Every range violation across all sections.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (_, stage) in STAGE_SECTIONS {
            errs.extend(self.stage(stage).validate());
        }
        if self.data.ds == 0 {
            errs.push("data.ds must be >= 1".into());
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.dir.is_empty() {
                    errs.extend(self.synthetic.validate());
                }
                let (h, w) = (self.synthetic.height, self.synthetic.width);
                if self.data.ds > 0 && (h % self.data.ds != 0 || w % self.data.ds != 0) {
                    errs.push(format!("data.ds {} does not divide the {h}x{w} image", self.data.ds));
                }
            }
            DataSource::Cifar10 => {
                if self.data.dir.is_empty() {
                    errs.push("data.dir is required for cifar10".into());
                }
                if self.data.val_count == 0 {
                    errs.push("data.val_count must be >= 1".into());
                }
            }
        }
        if self.compare.budget > NUM_PATCHES {
            errs.push(format!("compare.budget must be <= {NUM_PATCHES}, got {}", self.compare.budget));
        }
        let m = self.compare.stochastic_mean_s;
        if !(m > 0.0 && m <= NUM_PATCHES as f64) {
            errs.push(format!(
                "compare.stochastic_mean_s must be in (0, {NUM_PATCHES}], got {}",
                self.compare.stochastic_mean_s
            ));
        }
        if self.sweep.sigmas.is_empty() || self.sweep.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            errs.push("sweep.sigmas must be a non-empty list of values >= 0".into());
        }
        if self.sweep.ratios.is_empty() || self.sweep.ratios.contains(&0) {
            errs.push("sweep.ratios must be a non-empty list of values >= 1".into());
        }
        if !matches!(self.sweep.stage, Stage::Ft1 | Stage::Ft2) {
            errs.push(format!("sweep.stage must be ft1 or ft2, got {}", self.sweep.stage.name()));
        }
        errs
    }

    /// Normalized config with every key spelled out; parses back to `self`.
    pub fn to_text(&self) -> String {
        fn f(v: f64) -> String {
            let s = format!("{v:?}");
            if s.contains(['.', 'e', 'i', 'N']) { s } else { format!("{s}.0") }
        }
        fn list<T>(v: &[T], g: impl Fn(&T) -> String) -> String {
            format!("[{}]", v.iter().map(g).collect::<Vec<_>>().join(", "))
        }
        let mut t = String::new();
        let _ = writeln!(t, "seed = {}", self.seed);
        let d = &self.data;
        let _ = write!(
            t,
            "\n[data]\nsource = \"{}\"\ndir = {}\nds = {}\nval_count = {}\n",
            d.source.name(),
            Value::String(d.dir.clone()),
            d.ds,
            d.val_count
        );
        let s = &self.synthetic;
        let _ = write!(
            t,
            "\n[synthetic]\nchannels = {}\nheight = {}\nwidth = {}\nnum_classes = {}\ninformative = {}\n\
             amplitude = {}\nnoise = {}\ntrain = {}\nval = {}\ntest = {}\nlabel_noise = {}\n",
            s.channels,
            s.height,
            s.width,
            s.num_classes,
            list(&s.informative, |v| v.to_string()),
            f(s.amplitude),
            f(s.noise),
            s.train,
            s.val,
            s.test,
            f(s.label_noise)
        );
        for (name, stage) in STAGE_SECTIONS {
            let c = self.stage(stage);
            let _ = write!(
                t,
                "\n[{name}]\nepochs = {}\nlearning_rate = {}\nbatch_size = {}\nsigma = {}\nalpha_start = {}\n\
                 alpha_end = {}\ngrad_through_scaling = {}\nclassifier_update = \"{}\"\naugment = {}\n\
                 init_lr_from_hr = {}\nrestore_best = {}\n",
                c.epochs,
                f(c.learning_rate),
                c.batch_size,
                f(c.sigma),
                f(c.alpha_start),
                f(c.alpha_end),
                c.grad_through_scaling,
                c.classifier_update.name(),
                c.augment,
                c.init_lr_from_hr,
                c.restore_best
            );
        }
        let _ = write!(
            t,
            "\n[compare]\nbudget = {}\nstochastic_mean_s = {}\n",
            self.compare.budget,
            f(self.compare.stochastic_mean_s)
        );
        let _ = write!(
            t,
            "\n[sweep]\nsigmas = {}\nratios = {}\nstage = \"{}\"\n",
            list(&self.sweep.sigmas, |v| f(*v)),
            list(&self.sweep.ratios, |v| v.to_string()),
            self.sweep.stage.name()
        );
        let agg = match self.bagnet.aggregation {
            BagAggregation::Logits => "logits",
            BagAggregation::Probabilities => "probabilities",
        };
        let _ = write!(t, "\n[bagnet]\naggregation = \"{agg}\"\n");
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors(text: &str) -> Vec<String> {
        match RunConfig::parse(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn missing_sigma_is_filled_per_stage() {
        let cfg = RunConfig::parse("[pt]\nepochs = 3\n[ft1]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.pt.sigma, 0.5);
        assert_eq!(cfg.ft1.sigma, 5.0);
        assert_eq!(cfg.ft2.sigma, 5.0);
        let text = cfg.to_text();
        assert!(text.contains("[pt]\nepochs = 3\nlearning_rate = 0.0001\nbatch_size = 128\nsigma = 0.5\n"));
        assert!(text.contains("[ft1]\nepochs = 2\nlearning_rate = 0.0001\nbatch_size = 128\nsigma = 5.0\n"));
    }

    #[test]
    fn rejects_bad_alpha_and_negative_lr() {
        let e = errors("[pt]\nalpha_start = 0.9\nalpha_end = 0.7\nlearning_rate = -0.01\n");
        assert_eq!(e.len(), 2, "{e:?}");
        assert!(e.iter().any(|m| m.contains("alpha_start 0.9 exceeds alpha_end 0.7")));
        assert!(e.iter().any(|m| m.contains("pt.learning_rate must be > 0")));
    }

    #[test]
    fn reports_every_problem() {
        let e = errors(
            "seed = -1\nbogus = 1\n[ft2]\nepochs = \"ten\"\nclassifier_update = \"worst\"\n\
             [nowhere]\nx = 1\n[sweep]\nratios = [2, 0]\n[compare]\nbudget = 17\n",
        );
        for needle in [
            "seed must be a non-negative integer",
            "unknown key bogus",
            "ft2.epochs must be a non-negative integer",
            "ft2.classifier_update",
            "unknown section [nowhere]",
            "sweep.ratios",
            "compare.budget",
        ] {
            assert!(e.iter().any(|m| m.contains(needle)), "missing {needle:?} in {e:?}");
        }
    }

    #[test]
    fn malformed_text_is_an_error() {
        assert!(RunConfig::parse("[pt\nepochs = 1").is_err());
        assert!(RunConfig::parse("sigma 5").is_err());
    }

    #[test]
    fn seed_reaches_every_consumer() {
        let cfg = RunConfig::parse("seed = 42\n").unwrap();
        assert_eq!(cfg.synthetic.seed, 42);
        for (_, s) in STAGE_SECTIONS {
            assert_eq!(cfg.stage(s).seed, 42);
        }
    }

    #[test]
    fn ds_must_divide_image() {
        assert!(errors("[data]\nds = 3\n").iter().any(|m| m.contains("does not divide")));
        assert!(errors("[data]\nsource = \"cifar10\"\n").iter().any(|m| m.contains("data.dir")));
    }

    #[test]
    fn normalized_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(7);
        cfg.pt.learning_rate = 1e-3;
        cfg.ft2.classifier_update = ClassifierUpdate::Both;
        cfg.sweep.sigmas = vec![0.25, 3.0];
        cfg.synthetic.label_noise = 0.05;
        cfg.data.dir = "some \"quoted\" dir".into();
        cfg.bagnet.aggregation = BagAggregation::Probabilities;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
