use crate::datakit::Modality;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

use super::checkpoint::Checkpoint;

const LSTM_PARTS: [&str; 6] = ["fwd.wx", "fwd.wh", "fwd.b", "bwd.wx", "bwd.wh", "bwd.b"];

/// Builds a fresh multitask model whose speech path starts from a pretrained
/// standalone speech model: its first `L-K` encoder layers become the speech
/// modality encoder, the remaining `K` the shared encoder, and its input
/// adapter is copied. Everything else keeps its fresh initialization.
pub fn transfer(pretrained: &Checkpoint, config: ModelConfig, speech_task: &str) -> Result<Model> {
    let source = pretrained.to_model()?;
    let src_cfg = source.config();
    if src_cfg.tasks.len() != 1 || src_cfg.tasks[0].modality != Modality::Speech {
        return Err(Error::Config("pretrained model must have exactly one speech task".into()));
    }
    let mut target = Model::new(config)?;
    let q = target.config().task_index(speech_task)?;
    if target.config().tasks[q].modality != Modality::Speech {
        return Err(Error::Config(format!("task {speech_task:?} is not a speech task")));
    }
    let mut mismatched = Vec::new();
    if src_cfg.encoder_layers != target.config().encoder_layers {
        mismatched.push(format!(
            "encoder_layers: {} vs {}",
            src_cfg.encoder_layers,
            target.config().encoder_layers
        ));
    }
    let mut pairs: Vec<(String, String)> = ["adapter.w", "adapter.b"]
        .iter()
        .map(|p| (format!("task.{}.{p}", src_cfg.tasks[0].name), format!("task.{speech_task}.{p}")))
        .collect();
    for layer in 0..src_cfg.encoder_layers.min(target.config().encoder_layers) {
        let from = source.encoder_layer_prefix(0, layer);
        let to = target.encoder_layer_prefix(q, layer);
        for part in LSTM_PARTS {
            pairs.push((format!("{from}.{part}"), format!("{to}.{part}")));
        }
    }
    for (from, to) in &pairs {
        let (a, b) = (source.params().by_name(from), target.params().by_name(to));
        match (a, b) {
            (Some(a), Some(b)) if a.shape() == b.shape() => {}
            (Some(a), Some(b)) => mismatched.push(format!("{from} -> {to}: {:?} vs {:?}", a.shape(), b.shape())),
            _ => mismatched.push(format!("{from} -> {to}: missing")),
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::ParamMismatch(mismatched));
    }
    for (from, to) in &pairs {
        let v = source.params().by_name(from).expect("checked above").clone();
        target.params_mut().assign(to, &v)?;
    }
    Ok(target)
}
