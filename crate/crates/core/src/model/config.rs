use serde::{Deserialize, Serialize};

use crate::datakit::Modality;
use crate::error::{Error, Result};

/// Input side of one task as the network sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInput {
    pub name: String,
    pub modality: Modality,
    /// Input vocabulary size for text tasks.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl TaskInput {
    pub fn speech(name: &str) -> Self {
        TaskInput {
            name: name.to_string(),
            modality: Modality::Speech,
            vocab_size: None,
        }
    }

    pub fn text(name: &str, vocab_size: usize) -> Self {
        TaskInput {
            name: name.to_string(),
            modality: Modality::Text,
            vocab_size: Some(vocab_size),
        }
    }
}

fn default_encoder_layers() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_decoder_layers() -> usize {
    2
}
fn default_input_dim() -> usize {
    192
}
fn default_init_scale() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Recurrent layers on every task's encoder path.
    #[serde(default = "default_encoder_layers")]
    pub encoder_layers: usize,
    /// How many of those layers (the last ones) are shared by all tasks.
    pub shared_layers: usize,
    /// LSTM units per direction in the encoder.
    pub hidden: usize,
    /// Width of stacked speech frames and of text input embeddings.
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    pub attention_dim: usize,
    #[serde(default = "default_decoder_layers")]
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_embed: usize,
    pub output_vocab: usize,
    #[serde(default = "default_true")]
    pub use_task_embedding: bool,
    pub tasks: Vec<TaskInput>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for the given tasks and output vocabulary.
    pub fn desk(tasks: Vec<TaskInput>, output_vocab: usize) -> Self {
        ModelConfig {
            encoder_layers: 4,
            shared_layers: 1,
            hidden: 48,
            input_dim: 192,
            attention_heads: 4,
            attention_dim: 48,
            decoder_layers: 2,
            decoder_hidden: 96,
            decoder_embed: 48,
            output_vocab,
            use_task_embedding: true,
            tasks,
            init_scale: 0.05,
            seed: 0,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Recurrent layers owned by each task's modality encoder.
    pub fn modality_layers(&self) -> usize {
        self.encoder_layers - self.shared_layers
    }

    pub fn encoder_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.shared_layers > self.encoder_layers {
            return fail(format!(
                "shared layers {} exceed encoder layers {}",
                self.shared_layers, self.encoder_layers
            ));
        }
        if self.tasks.is_empty() {
            return fail("model needs at least one task".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return fail(format!("duplicate task {:?}", t.name));
            }
            match (t.modality, t.vocab_size) {
                (Modality::Speech, None) => {}
                (Modality::Text, Some(v)) if v > 0 => {}
                _ => return fail(format!("task {:?}: text tasks need a vocabulary size, speech none", t.name)),
            }
        }
        let dims = [
            ("hidden", self.hidden),
            ("input_dim", self.input_dim),
            ("attention_heads", self.attention_heads),
            ("attention_dim", self.attention_dim),
            ("decoder_layers", self.decoder_layers),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_embed", self.decoder_embed),
            ("output_vocab", self.output_vocab),
        ];
        for (name, v) in dims {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.init_scale >= 0.0) {
            return fail("init_scale must be non-negative".into());
        }
        Ok(())
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }
}
