//! Flat `key = value` run configuration. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{Split, SyntheticSpec};
use crate::decoder::ConcatSet;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::parallel::Execution;
use crate::params::WeightInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Dir(PathBuf),
}

/// Which grid `ablate` sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationGrid {
    /// Equalization modules crossed with concat sets.
    Modules,
    /// The nine (alpha, beta) pairs.
    LossWeights,
}

impl FromStr for AblationGrid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "modules" => Ok(AblationGrid::Modules),
            "loss_weights" => Ok(AblationGrid::LossWeights),
            other => Err(format!("unknown ablation grid {other:?} (expected modules or loss_weights)")),
        }
    }
}

impl std::fmt::Display for AblationGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationGrid::Modules => "modules",
            AblationGrid::LossWeights => "loss_weights",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub loss: LossWeights,
    pub data: DataSource,
    /// Generator settings; `size` and `classes` always follow the model.
    pub synthetic: SyntheticSpec,
    pub eval_split: Split,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub execution: Execution,
    pub ablate_grid: AblationGrid,
    pub ablate_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            seed: 0,
            model,
            batch_size: 4,
            epochs: 10,
            optimizer: OptimizerKind::Adam,
            lr: 5e-4,
            loss: LossWeights::default(),
            data: DataSource::Synthetic,
            synthetic: SyntheticSpec {
                size: model.image_size,
                classes: model.classes,
                ..SyntheticSpec::default()
            },
            eval_split: Split::Test,
            out_dir: PathBuf::from("run"),
            checkpoint_every: 1,
            execution: Execution::default(),
            ablate_grid: AblationGrid::Modules,
            ablate_seeds: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(Error::Config(format!("{key} = {other:?}: expected on or off"))),
    }
}

fn switch(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "classes" => m.classes = parse(key, value)?,
            "base_channels" => m.base_channels = parse(key, value)?,
            "patch" => m.patch = parse(key, value)?,
            "window" => m.window = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "ilfem" => m.ilfem = parse_switch(key, value)?,
            "clfem" => m.clfem = parse_switch(key, value)?,
            "additive_up" => m.additive_up = parse_switch(key, value)?,
            "concat_set" => m.concat_set = parse::<ConcatSet>(key, value)?,
            "weight_init" => m.weight_init = parse::<WeightInit>(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "optimizer" => self.optimizer = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "alpha" => self.loss.alpha = parse(key, value)?,
            "beta" => self.loss.beta = parse(key, value)?,
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic,
                    path => DataSource::Dir(PathBuf::from(path)),
                }
            }
            "synthetic_n" => self.synthetic.n = parse(key, value)?,
            "imbalance" => self.synthetic.imbalance = parse(key, value)?,
            "data_seed" => self.synthetic.seed = parse(key, value)?,
            "train_frac" => self.synthetic.train_frac = parse(key, value)?,
            "val_frac" => self.synthetic.val_frac = parse(key, value)?,
            "noise" => self.synthetic.noise = parse(key, value)?,
            "eval_split" => self.eval_split = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "execution" => self.execution = parse(key, value)?,
            "ablate_grid" => self.ablate_grid = parse(key, value)?,
            "ablate_seeds" => self.ablate_seeds = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        self.synthetic.size = self.model.image_size;
        self.synthetic.classes = self.model.classes;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        self.loss.validate().map_err(Error::Config)?;
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive".into());
        }
        if self.ablate_seeds == 0 {
            return fail("ablate_seeds must be positive".into());
        }
        if self.data == DataSource::Synthetic {
            self.synthetic.validate().map_err(Error::Config)?;
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` gives back the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.synthetic;
        let data = match &self.data {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Dir(p) => p.display().to_string(),
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k} = {v}").expect("write to string");
        kv("seed", &self.seed);
        kv("image_size", &m.image_size);
        kv("classes", &m.classes);
        kv("base_channels", &m.base_channels);
        kv("patch", &m.patch);
        kv("window", &m.window);
        kv("heads", &m.heads);
        kv("ilfem", &switch(m.ilfem));
        kv("clfem", &switch(m.clfem));
        kv("additive_up", &switch(m.additive_up));
        kv("concat_set", &m.concat_set);
        kv("weight_init", &m.weight_init);
        kv("batch_size", &self.batch_size);
        kv("epochs", &self.epochs);
        kv("optimizer", &self.optimizer);
        kv("lr", &self.lr);
        kv("alpha", &self.loss.alpha);
        kv("beta", &self.loss.beta);
        kv("data", &data);
        kv("synthetic_n", &s.n);
        kv("imbalance", &s.imbalance);
        kv("data_seed", &s.seed);
        kv("train_frac", &s.train_frac);
        kv("val_frac", &s.val_frac);
        kv("noise", &s.noise);
        kv("eval_split", &self.eval_split);
        kv("out_dir", &self.out_dir.display());
        kv("checkpoint_every", &self.checkpoint_every);
        kv("execution", &self.execution);
        kv("ablate_grid", &self.ablate_grid);
        kv("ablate_seeds", &self.ablate_seeds);
        out
    }
}
