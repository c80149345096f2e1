//! Experiment configuration files.
//!
//! A config is JSON; every section and field is optional and falls back to
//! the defaults below. Command-line flags override file values, and the
//! merged result is written into the run directory as `config.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use usted_core::experiment::{ModelSize, SynthConfig, TaskMix, ASR};
use usted_core::training::TrainConfig;

/// Encoder depth of every model built from a config.
pub const ENCODER_LAYERS: usize = 4;

/// Invalid arguments or configuration, detected before any compute.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub size: ModelSize,
    /// Encoder layers shared by all tasks (K).
    pub shared_layers: usize,
    pub use_task_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            size: ModelSize {
                hidden: 24,
                attention_dim: 24,
                decoder_hidden: 48,
                decoder_embed: 24,
            },
            shared_layers: 1,
            use_task_embedding: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of model initialization, task sampling and corruption.
    pub seed: u64,
    /// Directory written by `synth`; when absent the corpus is generated in
    /// memory from `synth`.
    pub corpus_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub mix: TaskMix,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Tasks scored on dev data for checkpoint selection.
    pub dev_tasks: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut train = TrainConfig::new(1000, 8, 0);
        train.learning_rate = 3e-3;
        train.eval_interval = 250;
        train.count_steps_of = Some(ASR.into());
        ExperimentConfig {
            seed: 0,
            corpus_dir: None,
            output_dir: None,
            synth: SynthConfig::default(),
            mix: TaskMix::default(),
            model: ModelSection::default(),
            train,
            dev_tasks: vec![ASR.into()],
        }
    }
}

/// Flag values layered over a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    pub shared_layers: Option<usize>,
    pub mask_rate: Option<f64>,
    pub loss_weights: Vec<(String, f64)>,
    pub no_task_embedding: bool,
    pub steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// File config (or defaults) with flags applied and validated.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> anyhow::Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(o);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(d) = &o.corpus_dir {
            self.corpus_dir = Some(d.clone());
        }
        if let Some(k) = o.shared_layers {
            self.model.shared_layers = k;
        }
        if let Some(r) = o.mask_rate {
            self.mix.mask_rate = r;
        }
        for (task, w) in &o.loss_weights {
            self.mix.loss_weights.insert(task.clone(), *w);
        }
        if o.no_task_embedding {
            self.model.use_task_embedding = false;
        }
        if let Some(n) = o.steps {
            self.train.steps = n;
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let k = self.model.shared_layers;
        if k > ENCODER_LAYERS {
            return Err(usage(format!("shared layers must be in 0..={ENCODER_LAYERS}, got {k}")));
        }
        let r = self.mix.mask_rate;
        if !(0.0..=1.0).contains(&r) {
            return Err(usage(format!("mask rate must be in [0, 1], got {r}")));
        }
        let names = self.mix.task_names();
        for (task, w) in &self.mix.loss_weights {
            if !names.contains(&task.as_str()) {
                return Err(usage(format!("loss weight for unknown task {task:?}")));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(usage(format!("loss weight of {task} must be finite and non-negative, got {w}")));
            }
        }
        for t in &self.dev_tasks {
            if !names.contains(&t.as_str()) {
                return Err(usage(format!("dev task {t:?} is not trained")));
            }
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(usage("steps and batch size must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }
}

/// Parses `task=weight`.
pub fn parse_loss_weight(s: &str) -> Result<(String, f64), String> {
    let (task, w) = s.split_once('=').ok_or_else(|| format!("expected task=weight, got {s:?}"))?;
    let w: f64 = w.parse().map_err(|e| format!("bad weight {w:?}: {e}"))?;
    Ok((task.to_string(), w))
}

/// Loss weights as a map, for reports.
pub fn weights_of(c: &ExperimentConfig) -> BTreeMap<String, f64> {
    c.mix
        .task_names()
        .into_iter()
        .map(|n| (n.to_string(), c.mix.loss_weights.get(n).copied().unwrap_or(1.0)))
        .collect()
}
