use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datakit::TaskRegistry;
use crate::error::{Error, Result};

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Per-task loss weights by task name; tasks not listed use the weight
    /// in their registry entry.
    pub loss_weights: BTreeMap<String, f64>,
    pub seed: u64,
    /// Steps between dev evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// When set, `steps` counts only steps drawn from this task, so runs
    /// with different task mixes see the same amount of its data.
    pub count_steps_of: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(1000, 8, 0)
    }
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size,
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_eps(),
            clip_norm: default_clip(),
            loss_weights: BTreeMap::new(),
            seed,
            eval_interval: 0,
            count_steps_of: None,
        }
    }

    /// Effective loss weight of every registered task, in task order.
    pub fn task_weights(&self, registry: &TaskRegistry) -> Result<Vec<f64>> {
        for name in self.loss_weights.keys() {
            registry.task_by_name(name)?;
        }
        let weights: Vec<f64> = registry
            .tasks()
            .iter()
            .map(|t| self.loss_weights.get(&t.name).copied().unwrap_or(t.loss_weight))
            .collect();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {weights:?}")));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Config("at least one task needs a positive loss weight".into()));
        }
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) || !(self.adam_eps > 0.0) {
            return fail("learning rate, clip norm and adam eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}
