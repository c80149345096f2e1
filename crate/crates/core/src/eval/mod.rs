//! Decoding and scoring.

mod decode;
mod metrics;

pub use decode::{
    beam_decode, beam_search, fixed_width_search, greedy_decode_batch, perplexity, DecodeConfig, Hypothesis, ModelScorer, RowState,
    StepScorer,
};
pub use metrics::{bleu, edit_distance, token_error_rate, wer, wer_str, ErrorCounter, BLEU_MAX_ORDER};
