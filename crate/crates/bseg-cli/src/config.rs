//! Flat `key = value` run configuration.
//!
//! Unknown keys are rejected, and every resolved value (defaults included)
//! is echoed back into the run directory as `resolved_config.txt`, which is
//! sufficient to reproduce the run exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bseg::bayes_uq::DecisionRule;
use bseg::densenet::NetworkSpec;
use bseg::synthdata::{SceneSpec, Task};
use bseg::training::{ClassStats, TrainConfig, WeightScheme};
use bseg::{Error, Result};

/// Architecture selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Profile {
    Tiny,
    Models12,
    Model3,
    Custom(Vec<usize>),
}

impl Profile {
    fn name(&self) -> String {
        match self {
            Profile::Tiny => "tiny".into(),
            Profile::Models12 => "models-1-2".into(),
            Profile::Model3 => "model-3".into(),
            Profile::Custom(counts) => counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "models-1-2" => Ok(Profile::Models12),
            "model-3" => Ok(Profile::Model3),
            other if other.contains(',') => {
                let counts = other
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad profile entry {p:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                Ok(Profile::Custom(counts))
            }
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected tiny, models-1-2, model-3, or a comma list)"
            ))),
        }
    }
}

/// Weight scheme and decision rule, e.g. `UW-ML`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub scheme: WeightScheme,
    pub ml_rule: bool,
}

impl Strategy {
    pub fn name(&self) -> String {
        format!(
            "{}-{}",
            self.scheme.name(),
            if self.ml_rule { "ML" } else { "MAP" }
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (scheme, rule) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("strategy {s:?} must look like UW-MAP")))?;
        let scheme = WeightScheme::parse(scheme)?;
        let ml_rule = match rule {
            "MAP" => false,
            "ML" => true,
            other => {
                return Err(Error::Config(format!(
                    "unknown decision rule {other:?} (expected MAP or ML)"
                )))
            }
        };
        Ok(Strategy { scheme, ml_rule })
    }

    /// MFW-ML works but sits outside the three benchmarked strategies.
    pub fn is_extra(&self) -> bool {
        self.scheme == WeightScheme::MedianFrequency && self.ml_rule
    }

    pub fn rule(&self, stats: &ClassStats) -> DecisionRule {
        if self.ml_rule {
            DecisionRule::ml_from_stats(stats)
        } else {
            DecisionRule::Map
        }
    }
}

/// Which multi-run experiment a preset drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// Benchmark and Bayesian models for UW-MAP / UW-ML / MFW-MAP.
    SixCombinations,
    /// One benchmark/Bayesian pair under a single strategy.
    BenchmarkPair,
    /// Base Bayesian model plus its uncertainty-assisted surrogate.
    SurrogatePair,
    /// Surrogate comparison across all three tasks in one run.
    SurrogateTrio,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SixCombinations => "six-combinations",
            ExperimentKind::BenchmarkPair => "benchmark-pair",
            ExperimentKind::SurrogatePair => "surrogate-pair",
            ExperimentKind::SurrogateTrio => "surrogate-trio",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "six-combinations" => Ok(ExperimentKind::SixCombinations),
            "benchmark-pair" => Ok(ExperimentKind::BenchmarkPair),
            "surrogate-pair" => Ok(ExperimentKind::SurrogatePair),
            "surrogate-trio" => Ok(ExperimentKind::SurrogateTrio),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

/// Every tunable of the pipeline, with defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub data_seed: u64,
    pub split_seed: u64,
    pub profile: Profile,
    pub growth_rate: usize,
    pub stem_filters: usize,
    pub dropout_p: f64,
    pub strategy: Strategy,
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2_coeff: f64,
    pub train_seed: u64,
    pub val_samples: usize,
    pub val_deterministic: bool,
    pub samples: usize,
    pub mc_seed: u64,
    pub map_samples: usize,
    pub experiment: Option<ExperimentKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            task: Task::Crack,
            width: 96,
            height: 64,
            count: 60,
            data_seed: 0,
            split_seed: 0,
            profile: Profile::Tiny,
            growth_rate: 0, // 0 = profile default
            stem_filters: 0,
            dropout_p: 0.5,
            strategy: Strategy {
                scheme: WeightScheme::Uniform,
                ml_rule: false,
            },
            lr0: train.lr0,
            lr_decay_per_epoch: train.lr_decay_per_epoch,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            l2_coeff: train.l2_coeff,
            train_seed: 0,
            val_samples: train.val_samples,
            val_deterministic: false,
            samples: 50,
            mc_seed: 0,
            map_samples: 50,
            experiment: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: missing '=' in {line:?}", line_no + 1))
            })?;
            config.apply(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn int<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
        }
        match key {
            "task" => self.task = Task::parse(value)?,
            "width" => self.width = int(key, value)?,
            "height" => self.height = int(key, value)?,
            "count" => self.count = int(key, value)?,
            "data_seed" => self.data_seed = int(key, value)?,
            "split_seed" => self.split_seed = int(key, value)?,
            "profile" => self.profile = Profile::parse(value)?,
            "growth_rate" => self.growth_rate = int(key, value)?,
            "stem_filters" => self.stem_filters = int(key, value)?,
            "dropout_p" => self.dropout_p = int(key, value)?,
            "strategy" => self.strategy = Strategy::parse(value)?,
            "lr0" => self.lr0 = int(key, value)?,
            "lr_decay_per_epoch" => self.lr_decay_per_epoch = int(key, value)?,
            "batch_size" => self.batch_size = int(key, value)?,
            "max_epochs" => self.max_epochs = int(key, value)?,
            "patience" => self.patience = int(key, value)?,
            "l2_coeff" => self.l2_coeff = int(key, value)?,
            "train_seed" => self.train_seed = int(key, value)?,
            "val_samples" => self.val_samples = int(key, value)?,
            "val_deterministic" => {
                self.val_deterministic = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "bad value {other:?} for key val_deterministic"
                        )))
                    }
                }
            }
            "samples" => self.samples = int(key, value)?,
            "mc_seed" => self.mc_seed = int(key, value)?,
            "map_samples" => self.map_samples = int(key, value)?,
            "experiment" => self.experiment = Some(ExperimentKind::parse(value)?),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            task: self.task,
            width: self.width,
            height: self.height,
            count: self.count,
            seed: self.data_seed,
        }
    }

    /// The network described by profile and overrides; `benchmark` strips
    /// the dropout.
    pub fn network(&self, benchmark: bool) -> NetworkSpec {
        let mut spec = match &self.profile {
            Profile::Tiny => NetworkSpec::tiny(self.task.num_classes(), self.task.input_channels()),
            Profile::Models12 => {
                NetworkSpec::models_1_2(self.task.num_classes(), self.task.input_channels())
            }
            Profile::Model3 => {
                NetworkSpec::model_3(self.task.num_classes(), self.task.input_channels())
            }
            Profile::Custom(counts) => NetworkSpec {
                db_layer_counts: counts.clone(),
                growth_rate: 16,
                stem_filters: 48,
                dropout_p: 0.5,
                num_classes: self.task.num_classes(),
                input_channels: self.task.input_channels(),
            },
        };
        if self.growth_rate > 0 {
            spec.growth_rate = self.growth_rate;
        }
        if self.stem_filters > 0 {
            spec.stem_filters = self.stem_filters;
        }
        spec.dropout_p = if benchmark { 0.0 } else { self.dropout_p };
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            lr_decay_per_epoch: self.lr_decay_per_epoch,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            l2_coeff: self.l2_coeff,
            weight_scheme: self.strategy.scheme,
            seed: self.train_seed,
            val_samples: self.val_samples,
            val_deterministic: self.val_deterministic,
        }
    }

    /// All resolved keys in a stable order.
    pub fn resolved(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("task", self.task.name().to_string());
        map.insert("width", self.width.to_string());
        map.insert("height", self.height.to_string());
        map.insert("count", self.count.to_string());
        map.insert("data_seed", self.data_seed.to_string());
        map.insert("split_seed", self.split_seed.to_string());
        map.insert("profile", self.profile.name());
        map.insert("growth_rate", self.growth_rate.to_string());
        map.insert("stem_filters", self.stem_filters.to_string());
        map.insert("dropout_p", self.dropout_p.to_string());
        map.insert("strategy", self.strategy.name());
        map.insert("lr0", format!("{:e}", self.lr0));
        map.insert("lr_decay_per_epoch", self.lr_decay_per_epoch.to_string());
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("max_epochs", self.max_epochs.to_string());
        map.insert("patience", self.patience.to_string());
        map.insert("l2_coeff", format!("{:e}", self.l2_coeff));
        map.insert("train_seed", self.train_seed.to_string());
        map.insert("val_samples", self.val_samples.to_string());
        map.insert("val_deterministic", self.val_deterministic.to_string());
        map.insert("samples", self.samples.to_string());
        map.insert("mc_seed", self.mc_seed.to_string());
        map.insert("map_samples", self.map_samples.to_string());
        if let Some(e) = self.experiment {
            map.insert("experiment", e.name().to_string());
        }
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        if self.strategy.is_extra() {
            out.push_str("# note: MFW-ML sits outside the three benchmarked strategies\n");
        }
        out
    }
}
