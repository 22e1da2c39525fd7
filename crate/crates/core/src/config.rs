//! Run configuration documents (TOML).
//!
//! Relative paths resolve against the working directory, except the
//! manifest and task paths under `[data]`, which resolve against `data.dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::F1Average;
use crate::model::{InputSpec, ModelConfig};
use crate::task::TaskSpec;
use crate::train::{LrSchedule, StepConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Each `[[steps]]` entry is one time step of the sequence.
    #[default]
    Incremental,
    /// Exactly two steps (scenes, then events) trained together with the
    /// first step's hyperparameters.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    #[serde(default = "default_train")]
    pub train_manifest: PathBuf,
    #[serde(default = "default_eval")]
    pub eval_manifest: PathBuf,
    /// JSON array of task specifications.
    #[serde(default = "default_tasks")]
    pub tasks: PathBuf,
    /// Expected rate of WAV inputs.
    #[serde(default = "default_sr")]
    pub sample_rate_hz: u32,
    /// WAV inputs are cut into segments of this length.
    #[serde(default = "default_segment")]
    pub segment_seconds: f64,
    /// When present, `train` first generates a synthetic corpus into `dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

fn default_train() -> PathBuf {
    "train.tsv".into()
}
fn default_eval() -> PathBuf {
    "eval.tsv".into()
}
fn default_tasks() -> PathBuf {
    "tasks.json".into()
}
fn default_sr() -> u32 {
    44_100
}
fn default_segment() -> f64 {
    10.0
}

/// Hyperparameters of one step; missing fields take the step defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepEntry {
    pub task: u32,
    #[serde(default = "d::lr_initial")]
    pub lr_initial: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d::epochs")]
    pub epochs: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::shuffle")]
    pub shuffle: bool,
}

mod d {
    use crate::train::StepConfig;

    pub fn lr_initial() -> f64 {
        StepConfig::default().lr_initial
    }
    pub fn epochs() -> usize {
        StepConfig::default().epochs
    }
    pub fn batch_size() -> usize {
        StepConfig::default().batch_size
    }
    pub fn momentum() -> f64 {
        StepConfig::default().momentum
    }
    pub fn shuffle() -> bool {
        true
    }
}

impl StepEntry {
    pub fn step_config(&self, loss: &LossConfig) -> StepConfig {
        StepConfig {
            lr_initial: self.lr_initial,
            lr_min: self.lr_min,
            lr_schedule: self.lr_schedule,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: self.seed,
            shuffle: self.shuffle,
            loss: loss.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: RunMode,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub f1_average: F1Average,
    pub input: InputSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub data: DataConfig,
    pub steps: Vec<StepEntry>,
}

/// Command-line switches applied on top of a configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub no_kd: bool,
    pub no_indl: bool,
    pub lambda_fixed: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            Error::Configuration(format!("{}: {}", origin.display(), e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.model.flatten_dim(&self.input)?;
        if self.steps.is_empty() {
            return Err(Error::Configuration("at least one [[steps]] entry is required".into()));
        }
        for s in &self.steps {
            s.step_config(&self.loss).validate()?;
        }
        if self.mode == RunMode::Joint && self.steps.len() != 2 {
            return Err(Error::Configuration(
                "joint mode takes exactly two steps: scenes, then events".into(),
            ));
        }
        if let Some(spec) = &self.data.synth {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.no_kd {
            self.loss.kd_enabled = false;
        }
        if o.no_indl {
            self.loss.indl_enabled = false;
        }
        if let Some(v) = o.lambda_fixed {
            self.loss.lambda = crate::losses::LambdaMode::Fixed(v);
        }
        if let Some(s) = o.lr_schedule {
            for step in &mut self.steps {
                step.lr_schedule = s;
            }
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
    }

    pub fn data_dir(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.data.dir)
    }

    pub fn out_dir(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.out_dir)
    }

    pub fn train_manifest(&self, workdir: &Path) -> PathBuf {
        self.data_dir(workdir).join(&self.data.train_manifest)
    }

    pub fn eval_manifest(&self, workdir: &Path) -> PathBuf {
        self.data_dir(workdir).join(&self.data.eval_manifest)
    }

    pub fn tasks_path(&self, workdir: &Path) -> PathBuf {
        self.data_dir(workdir).join(&self.data.tasks)
    }
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tasks: Vec<TaskSpec> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

pub fn write_tasks(path: &Path, tasks: &[TaskSpec]) -> Result<()> {
    let mut json = serde_json::to_string_pretty(tasks).expect("tasks serialize");
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
