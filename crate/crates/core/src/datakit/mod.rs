//! Synthetic corpora, speech features, MLM corruption, task registry and
//! batching.

mod batch;
pub mod corpus;
mod features;
pub mod manifest;
mod mlm;
mod speech;

pub use batch::{
    Batch, BatchInput, BatchSampler, Modality, PreparedInput, Sample, SampleInput, TaskRegistry, TaskSpec,
};
pub use corpus::{cipher, decipher, synth_parallel_corpus, synth_text_corpus, Grammar};
pub use features::{
    read_features, stack_downsample, write_features, FrameSequence, BASE_FEATURE_DIM, STACK, STRIDE,
};
pub use manifest::{load_samples, read_manifest, read_manifest_file, write_manifest, ManifestEntry};
pub use mlm::{corrupt_mlm, CorruptionConfig, MASK_WORD};
pub use speech::{SpeechRenderer, FRAME_PERIOD_MS};
