use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::SPECIALS;

/// Word standing in for a masked position before subword encoding.
pub const MASK_WORD: &str = SPECIALS[crate::tokenizer::MASK as usize];

/// Whole-word masking applied to text-task inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub mask_rate: f64,
    /// Seeds the corruption stream.
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn new(mask_rate: f64, seed: u64) -> Result<Self> {
        let c = CorruptionConfig { mask_rate, seed };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask rate {} outside [0, 1]", self.mask_rate)));
        }
        Ok(())
    }
}

/// Replaces each word by [`MASK_WORD`] independently with probability
/// `mask_rate`. Returns `(corrupted, target)`; the target is the input
/// unchanged.
pub fn corrupt_mlm<R: Rng>(words: &[&str], cfg: &CorruptionConfig, rng: &mut R) -> (Vec<String>, Vec<String>) {
    let corrupted = words
        .iter()
        .map(|&w| {
            // gen_bool is exact at 0 and 1
            if rng.gen_bool(cfg.mask_rate) {
                MASK_WORD.to_string()
            } else {
                w.to_string()
            }
        })
        .collect();
    (corrupted, words.iter().map(|w| w.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::corpus::{synth_text_corpus, Grammar};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extreme_rates() {
        let words = ["the", "cat", "runs"];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, t) = corrupt_mlm(&words, &CorruptionConfig::new(0.0, 0).unwrap(), &mut rng);
        assert_eq!(c, words);
        assert_eq!(t, words);
        let (c, t) = corrupt_mlm(&words, &CorruptionConfig::new(1.0, 0).unwrap(), &mut rng);
        assert!(c.iter().all(|w| w == MASK_WORD));
        assert_eq!(t, words);
    }

    #[test]
    fn rate_outside_unit_interval_is_rejected() {
        assert!(CorruptionConfig::new(1.5, 0).is_err());
        assert!(CorruptionConfig::new(-0.1, 0).is_err());
    }

    #[test]
    fn empirical_mask_fraction_matches_rate() {
        let corpus = synth_text_corpus(5, 10_000, &Grammar::default()).unwrap();
        let cfg = CorruptionConfig::new(0.4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut masked, mut total) = (0usize, 0usize);
        for line in &corpus {
            let words: Vec<&str> = line.split_whitespace().collect();
            let (c, t) = corrupt_mlm(&words, &cfg, &mut rng);
            assert_eq!(t, words);
            masked += c.iter().filter(|w| *w == MASK_WORD).count();
            total += words.len();
        }
        let frac = masked as f64 / total as f64;
        assert!((frac - 0.4).abs() <= 0.01, "masked fraction {frac}");
    }
}
