use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Corruption, Primitive};
use crate::error::{Error, Result};
use crate::pointnet::{fmt_f64, parse, parse_list, HeadSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
    Normals,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
            Task::Normals => "normals",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            "normals" => Ok(Task::Normals),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Mnist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: Vec<Primitive>,
    pub points: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub mnist_dir: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            classes: Primitive::ALL.to_vec(),
            points: 256,
            per_class: 200,
            noise: 0.01,
            seed: 0,
            test_fraction: 0.2,
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: 10_000,
            test_limit: 2_000,
        }
    }
}

impl DataConfig {
    pub fn input_dim(&self) -> usize {
        match self.source {
            DataSource::Synth => 3,
            DataSource::Mnist => 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.source {
            DataSource::Synth => self.classes.len(),
            DataSource::Mnist => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay` every this many epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub lr_floor: f64,
    /// Batch-norm momentum ramps linearly from start to end over the epochs.
    pub bn_momentum_start: f64,
    pub bn_momentum_end: f64,
    pub augment: bool,
    pub jitter: f64,
    /// Stop after the first epoch whose test accuracy reaches this value
    /// (classification only; 0 disables the per-epoch evaluation).
    pub stop_at_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.001,
            lr_decay_every: 20,
            lr_decay: 0.5,
            lr_floor: 1e-5,
            bn_momentum_start: 0.5,
            bn_momentum_end: 0.99,
            augment: true,
            jitter: 0.02,
            stop_at_accuracy: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.lr_decay_every == 0 { 0 } else { epoch / self.lr_decay_every };
        (self.lr * self.lr_decay.powi(steps as i32)).max(self.lr_floor)
    }

    pub fn bn_momentum_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.bn_momentum_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.bn_momentum_start + t * (self.bn_momentum_end - self.bn_momentum_start)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ks: vec![64, 128, 256, 512, 1024],
            ns: vec![64, 128, 256],
        }
    }
}

/// Everything a run depends on. Serialized as flat `key = value` lines with
/// dotted sections; [`ExperimentConfig::to_text`] prints every key, so its
/// output replays the run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Corruption applied to the test set for the final evaluation.
    pub eval_corruption: Corruption,
    pub sweep: SweepConfig,
    /// Data-derived model keys that were set explicitly (checked, not
    /// overwritten, by [`ExperimentConfig::resolve`]).
    explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig {
            task: Task::Classify,
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelSpec::classifier(4),
            train: TrainConfig::default(),
            eval_corruption: Corruption::None,
            sweep: SweepConfig::default(),
            explicit: BTreeSet::new(),
        };
        c.resolve().expect("default config is consistent");
        c
    }
}

const DERIVED_KEYS: [&str; 4] = ["model.input_dim", "model.classes", "model.parts", "model.head"];

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut c = ExperimentConfig::default();
        c.explicit.clear();
        c.apply_all(&pairs)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies overrides (task first, so head-specific keys land), then
    /// re-derives the data-dependent model fields.
    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "task") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "task") {
            self.set(k, v)?;
        }
        self.resolve()
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "task" => {
                self.task = parse(key, value)?;
                let head = match self.task {
                    Task::Classify => "classify",
                    Task::Segment => "segment",
                    Task::Normals => "normals",
                };
                self.model.apply_kv("model.head", head)?;
            }
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data.source" => {
                d.source = match value {
                    "synth" => DataSource::Synth,
                    "mnist" => DataSource::Mnist,
                    other => return Err(Error::Config(format!("unknown data source `{other}`"))),
                }
            }
            "data.classes" => {
                d.classes = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?
            }
            "data.points" => d.points = parse(key, value)?,
            "data.per_class" => d.per_class = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "data.test_fraction" => d.test_fraction = parse(key, value)?,
            "data.mnist_dir" => d.mnist_dir = PathBuf::from(value),
            "data.train_limit" => d.train_limit = parse(key, value)?,
            "data.test_limit" => d.test_limit = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.lr_decay_every" => t.lr_decay_every = parse(key, value)?,
            "train.lr_decay" => t.lr_decay = parse(key, value)?,
            "train.lr_floor" => t.lr_floor = parse(key, value)?,
            "train.bn_momentum_start" => t.bn_momentum_start = parse(key, value)?,
            "train.bn_momentum_end" => t.bn_momentum_end = parse(key, value)?,
            "train.augment" => t.augment = parse(key, value)?,
            "train.jitter" => t.jitter = parse(key, value)?,
            "train.stop_at_accuracy" => t.stop_at_accuracy = parse(key, value)?,
            "eval.corruption" => {
                let (name, amount) = match value.split_once(':') {
                    Some((n, a)) => (n.trim(), parse(key, a)?),
                    None => (value, 0.0),
                };
                self.eval_corruption = Corruption::from_parts(name, amount)?;
            }
            "sweep.ks" => self.sweep.ks = parse_list(key, value)?,
            "sweep.ns" => self.sweep.ns = parse_list(key, value)?,
            k if k.starts_with("model.") => {
                if k == "model.head" {
                    let want = self.task.to_string();
                    if value != want {
                        return Err(Error::Config(format!("model.head `{value}` conflicts with task `{want}`")));
                    }
                }
                if !self.model.apply_kv(k, value)? {
                    return Err(Error::Config(format!("unknown key `{k}`")));
                }
                if DERIVED_KEYS.contains(&k) {
                    self.explicit.insert(k.to_string());
                }
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Fills in the model fields that follow from the task and data
    /// (input width, class / part counts) and validates the result.
    pub fn resolve(&mut self) -> Result<()> {
        let check = |explicit: &BTreeSet<String>, key: &str, have: usize, want: usize| {
            if explicit.contains(key) && have != want {
                Err(Error::Config(format!("`{key} = {have}` but the data implies {want}")))
            } else {
                Ok(())
            }
        };
        let dim = self.data.input_dim();
        check(&self.explicit, "model.input_dim", self.model.input_dim, dim)?;
        self.model.input_dim = dim;
        let classes = self.data.num_classes();
        match &mut self.model.head {
            HeadSpec::Classify { num_classes, .. } => {
                check(&self.explicit, "model.classes", *num_classes, classes)?;
                *num_classes = classes;
            }
            HeadSpec::Segment { num_parts, categories, .. } => {
                if self.data.source != DataSource::Synth {
                    return Err(Error::Config("segmentation needs the synthetic part-labeled data".into()));
                }
                check(&self.explicit, "model.parts", *num_parts, Primitive::NUM_PARTS)?;
                *num_parts = Primitive::NUM_PARTS;
                if let Some(c) = categories {
                    if *c != classes {
                        return Err(Error::Config(format!("model.categories = {c} but the data has {classes}")));
                    }
                }
            }
            HeadSpec::Normals { .. } => {
                if self.data.source != DataSource::Synth {
                    return Err(Error::Config("normal estimation needs the synthetic data".into()));
                }
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.data.classes.is_empty() {
            return Err(Error::Config("data.classes is empty".into()));
        }
        self.model.validate()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let t = &self.train;
        let list = |w: &[usize]| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut kv: Vec<(String, String)> = vec![
            ("task".into(), self.task.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("out".into(), self.out.display().to_string()),
            (
                "data.source".into(),
                match d.source {
                    DataSource::Synth => "synth",
                    DataSource::Mnist => "mnist",
                }
                .into(),
            ),
            (
                "data.classes".into(),
                d.classes.iter().map(|p| p.name()).collect::<Vec<_>>().join(","),
            ),
            ("data.points".into(), d.points.to_string()),
            ("data.per_class".into(), d.per_class.to_string()),
            ("data.noise".into(), fmt_f64(d.noise)),
            ("data.seed".into(), d.seed.to_string()),
            ("data.test_fraction".into(), fmt_f64(d.test_fraction)),
            ("data.mnist_dir".into(), d.mnist_dir.display().to_string()),
            ("data.train_limit".into(), d.train_limit.to_string()),
            ("data.test_limit".into(), d.test_limit.to_string()),
        ];
        kv.extend(self.model.to_kv());
        kv.extend([
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.lr".into(), fmt_f64(t.lr)),
            ("train.lr_decay_every".into(), t.lr_decay_every.to_string()),
            ("train.lr_decay".into(), fmt_f64(t.lr_decay)),
            ("train.lr_floor".into(), fmt_f64(t.lr_floor)),
            ("train.bn_momentum_start".into(), fmt_f64(t.bn_momentum_start)),
            ("train.bn_momentum_end".into(), fmt_f64(t.bn_momentum_end)),
            ("train.augment".into(), t.augment.to_string()),
            ("train.jitter".into(), fmt_f64(t.jitter)),
            ("train.stop_at_accuracy".into(), fmt_f64(t.stop_at_accuracy)),
            (
                "eval.corruption".into(),
                format!("{}:{}", self.eval_corruption.name(), fmt_f64(self.eval_corruption.amount())),
            ),
            ("sweep.ks".into(), list(&self.sweep.ks)),
            ("sweep.ns".into(), list(&self.sweep.ns)),
        ]);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
