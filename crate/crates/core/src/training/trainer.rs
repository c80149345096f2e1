use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datakit::{Batch, BatchSampler, TaskRegistry};
use crate::error::{Error, Result};
use crate::eval::{greedy_decode_batch, ErrorCounter};
use crate::model::Model;
use crate::numerics::{Graph, ParamId, Tensor};
use crate::tokenizer::EOS;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::optim::{clip_global_norm, Adam};

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub task: String,
    /// Mean token negative log-likelihood of the batch, before weighting.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,task,loss,grad_norm,lr,wall_ms";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.step, r.task, r.loss, r.grad_norm, r.lr, r.wall_ms)?;
    }
    Ok(())
}

/// Weighted, token-normalized objective of one batch, as a graph node.
pub fn batch_objective(model: &Model, g: &mut Graph, batch: &Batch, weight: f64) -> Result<(crate::numerics::Var, f64)> {
    let out = model.forward_nll(g, batch)?;
    let tokens = out.tokens as f64;
    let mean = g.value(out.total).data()[0] / tokens;
    Ok((g.scale(out.total, weight / tokens), mean))
}

/// Value of the weighted objective of one batch without building gradients
/// elsewhere.
pub fn objective_value(model: &Model, batch: &Batch, weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (obj, _) = batch_objective(model, &mut g, batch, weight)?;
    Ok(g.value(obj).data()[0])
}

/// Gradients of the weighted objective for every parameter the batch
/// reaches, before clipping.
pub fn objective_gradients(model: &Model, batch: &Batch, weight: f64) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut g = Graph::new();
    let (obj, mean) = batch_objective(model, &mut g, batch, weight)?;
    let grads = g.backward(obj)?;
    let out = model
        .params()
        .iter()
        .filter_map(|(id, _, t)| g.param_var(id).map(|_| (id, grads.param(id, t.shape()))))
        .collect();
    Ok((mean, out))
}

/// Model, optimizer and the random stream driving task and batch sampling.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub lr: f64,
    pub clip_norm: f64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(TrainState {
            model,
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            lr: cfg.learning_rate,
            clip_norm: cfg.clip_norm,
        })
    }

    /// Restores model, optimizer and random stream from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut s = TrainState::new(ck.to_model()?, cfg)?;
        s.step = ck.step;
        if let Some(o) = &ck.optimizer {
            s.adam = o.clone().into();
        }
        if let Some(r) = ck.rng {
            s.rng = ChaCha8Rng::from_seed(r.seed);
            s.rng.set_word_pos(r.word_pos);
        }
        Ok(s)
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.step, seed);
        ck.optimizer = Some((&self.adam).into());
        ck.rng = Some(RngState {
            seed: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos(),
        });
        ck
    }

    /// Weighted loss, backward, clipping and one Adam update. A zero weight
    /// leaves the parameters and optimizer untouched.
    pub fn joint_step(&mut self, batch: &Batch, weight: f64, task_name: &str) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.step;
        let (mean, mut grads) = objective_gradients(&self.model, batch, weight)?;
        if !mean.is_finite() {
            return Err(Error::Diverged { step, what: "loss" });
        }
        let norm = clip_global_norm(&mut grads, self.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "gradient",
            });
        }
        if weight > 0.0 {
            for (id, g) in &grads {
                self.adam.update(self.model.params_mut(), *id, g, self.lr);
            }
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            task: task_name.to_string(),
            loss: mean,
            grad_norm: norm,
            lr: self.lr,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Dev error rates by greedy decoding.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DevReport {
    pub step: u64,
    /// `(task name, token error rate)` per dev task.
    pub error_rates: Vec<(String, f64)>,
    /// Sum of the error rates.
    pub criterion: f64,
}

pub const DEV_BATCH: usize = 16;

/// Batches of one dev task, addressed to the model's index for that task.
fn dev_batches(model: &Model, dev: &TaskRegistry, task: usize) -> Result<Vec<Batch>> {
    let model_task = model.config().task_index(&dev.task(task)?.name)?;
    let mut batches = dev.ordered_batches(task, DEV_BATCH, 0)?;
    for b in &mut batches {
        b.task = model_task;
    }
    Ok(batches)
}

/// Corpus token error rate of greedy outputs on one dev task, where `task`
/// indexes the dev registry.
pub fn dev_error_rate(model: &Model, dev: &TaskRegistry, task: usize) -> Result<f64> {
    let mut counter = ErrorCounter::default();
    for batch in dev_batches(model, dev, task)? {
        let hyps = greedy_decode_batch(model, &batch, None)?;
        for (r, h) in hyps.iter().enumerate() {
            let t = batch.target(r);
            let reference = t.strip_suffix(&[EOS]).unwrap_or(t);
            counter.add(reference, h)?;
        }
    }
    counter.rate()
}

/// Error rates of every task in the dev registry; tasks are matched to the
/// model by name.
pub fn evaluate_dev(model: &Model, dev: &TaskRegistry, step: u64) -> Result<DevReport> {
    let mut error_rates = Vec::new();
    for (q, t) in dev.tasks().iter().enumerate() {
        error_rates.push((t.name.clone(), dev_error_rate(model, dev, q)?));
    }
    let criterion = error_rates.iter().map(|(_, e)| e).sum();
    Ok(DevReport {
        step,
        error_rates,
        criterion,
    })
}

/// Mean token NLL over one dev task with fixed corruption.
pub fn dev_loss(model: &Model, dev: &TaskRegistry, task: usize) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for b in dev_batches(model, dev, task)? {
        let mut g = Graph::new();
        let out = model.forward_nll(&mut g, &b)?;
        nll += g.value(out.total).data()[0];
        tokens += out.tokens;
    }
    Ok(nll / tokens.max(1) as f64)
}

pub struct TrainOutcome {
    /// Checkpoint with the lowest dev criterion, or the final one without dev
    /// data.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<DevReport>,
}

/// Uniform task sampling with weighted joint steps until the step budget is
/// spent, evaluating on `dev` at intervals and at the end.
pub fn train_multitask(
    init: Model,
    registry: &TaskRegistry,
    dev: Option<&TaskRegistry>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let state = TrainState::new(init, cfg)?;
    train_from(state, registry, dev, cfg)
}

pub fn train_from(
    mut state: TrainState,
    registry: &TaskRegistry,
    dev: Option<&TaskRegistry>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let weights = cfg.task_weights(registry)?;
    for (q, t) in registry.tasks().iter().enumerate() {
        if state.model.config().task_index(&t.name)? != q {
            return Err(Error::Config(format!("task {} is not at model index {q}", t.name)));
        }
    }
    let counted = cfg
        .count_steps_of
        .as_deref()
        .map(|n| registry.task_by_name(n).map(|t| t.id))
        .transpose()?;
    let mut sampler = BatchSampler::new(registry);
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut spent = 0usize;

    let evaluate = |state: &TrainState, evals: &mut Vec<DevReport>, best: &mut Option<(f64, Checkpoint)>| -> Result<()> {
        if let Some(dev) = dev {
            let report = evaluate_dev(&state.model, dev, state.step)?;
            log::info!("step {} dev {:?}", state.step, report.error_rates);
            if best.as_ref().map_or(true, |(c, _)| report.criterion < *c) {
                *best = Some((report.criterion, state.checkpoint(cfg.seed)));
            }
            evals.push(report);
        }
        Ok(())
    };

    while spent < cfg.steps {
        let batch = sampler.sample_batch(registry, cfg.batch_size, &mut state.rng)?;
        let task = batch.task;
        let name = &registry.tasks()[task].name;
        let row = state.joint_step(&batch, weights[task], name)?;
        log::debug!("step {} task {} loss {:.4}", row.step, row.task, row.loss);
        metrics.push(row);
        if counted.map_or(true, |c| c == task) {
            spent += 1;
            if cfg.eval_interval > 0 && spent % cfg.eval_interval == 0 && spent < cfg.steps {
                evaluate(&state, &mut evals, &mut best)?;
            }
        }
    }
    evaluate(&state, &mut evals, &mut best)?;
    let last = state.checkpoint(cfg.seed);
    Ok(TrainOutcome {
        best: best.map_or_else(|| last.clone(), |(_, c)| c),
        last,
        metrics,
        evals,
    })
}

/// Trains a standalone single-task speech model.
pub fn pretrain_asr(
    init: Model,
    registry: &TaskRegistry,
    dev: Option<&TaskRegistry>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if registry.tasks().len() != 1 || registry.tasks()[0].modality != crate::datakit::Modality::Speech {
        return Err(Error::Config("pretraining needs exactly one speech task".into()));
    }
    train_multitask(init, registry, dev, cfg)
}
