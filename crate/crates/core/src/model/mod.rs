//! The multitask encoder-decoder: per-task modality encoders feeding a
//! shared context encoder and a shared attention decoder.

mod config;
mod gradcheck;
mod network;
mod params;

pub use config::{ModelConfig, TaskInput};
pub use network::{DecoderState, Encoded, FrozenMemory, FrozenState, Memory, Model, NllOutput, StepOutput};
pub use gradcheck::{check_model_gradients, GradCheckReport};
pub use params::{Init, ParamStore};

use serde::Serialize;

/// Closed-form parameter counts for a configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Task-owned parameters (embedding table, adapter, modality layers,
    /// task embedding), one entry per task.
    pub per_task: Vec<usize>,
    /// Recurrent layers each task's encoder path traverses.
    pub path_layers: usize,
    /// Encoder parameters reached by each task (its own plus shared).
    pub per_task_path: Vec<usize>,
    pub shared_encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

fn lstm_count(input: usize, hidden: usize) -> usize {
    4 * hidden * (input + hidden + 1)
}

pub fn param_count(config: &ModelConfig) -> crate::Result<ParamCount> {
    config.validate()?;
    let h = config.hidden;
    let w = config.encoder_width();
    let bilstm = 2 * lstm_count(w, h);
    let shared_encoder = config.shared_layers * bilstm;
    let per_task: Vec<usize> = config
        .tasks
        .iter()
        .map(|t| {
            t.vocab_size.map_or(0, |v| v * config.input_dim)
                + config.input_dim * w
                + w
                + config.modality_layers() * bilstm
                + if config.use_task_embedding { w } else { 0 }
        })
        .collect();
    let (dh, a, heads) = (config.decoder_hidden, config.attention_dim, config.attention_heads);
    let decoder = config.output_vocab * config.decoder_embed
        + (0..config.decoder_layers)
            .map(|l| lstm_count(if l == 0 { config.decoder_embed + w } else { dh }, dh))
            .sum::<usize>()
        + heads * (dh * a + w * a + 2 * a)
        + heads * w * w
        + w
        + (dh + w) * config.output_vocab
        + config.output_vocab;
    let total = per_task.iter().sum::<usize>() + shared_encoder + decoder;
    Ok(ParamCount {
        per_task_path: per_task.iter().map(|p| p + shared_encoder).collect(),
        per_task,
        path_layers: config.modality_layers() + config.shared_layers,
        shared_encoder,
        decoder,
        total,
    })
}
