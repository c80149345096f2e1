//! Synthetic "audio": each character is a fixed random prototype frame held
//! for a fixed number of frames, plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{FrameSequence, BASE_FEATURE_DIM};
use crate::error::{Error, Result};

/// Base frame period before stacking, in milliseconds.
pub const FRAME_PERIOD_MS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechRenderer {
    /// Seeds the per-character prototypes and durations.
    pub voice_seed: u64,
    pub dim: usize,
}

impl Default for SpeechRenderer {
    fn default() -> Self {
        SpeechRenderer {
            voice_seed: 0x5eed_a0d1,
            dim: BASE_FEATURE_DIM,
        }
    }
}

impl SpeechRenderer {
    fn char_rng(&self, c: char) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.voice_seed.to_le_bytes());
        seed[8..12].copy_from_slice(&(c as u32).to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Fixed prototype frame of a character.
    pub fn prototype(&self, c: char) -> Vec<f64> {
        let mut rng = self.char_rng(c);
        let _duration_draw: u32 = rng.gen();
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Fixed duration of a character, 2 to 4 frames.
    pub fn duration(&self, c: char) -> usize {
        let mut rng = self.char_rng(c);
        2 + (rng.gen::<u32>() % 3) as usize
    }

    /// Renders `text` character by character. `sigma == 0` is deterministic.
    pub fn render<R: Rng>(&self, text: &str, sigma: f64, rng: &mut R) -> Result<FrameSequence> {
        if text.is_empty() {
            return Err(Error::Config("cannot render empty text".into()));
        }
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::new();
        for c in text.chars() {
            let proto = self.prototype(c);
            for _ in 0..self.duration(c) {
                for &p in &proto {
                    let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    data.push(p + n);
                }
            }
        }
        FrameSequence::new(self.dim, data, FRAME_PERIOD_MS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_rendering_is_deterministic() {
        let r = SpeechRenderer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = r.render("the cat", 0.0, &mut rng).unwrap();
        let b = r.render("the cat", 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_count_is_sum_of_durations() {
        let r = SpeechRenderer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text = "a big dog sees my fish";
        let f = r.render(text, 0.3, &mut rng).unwrap();
        let want: usize = text.chars().map(|c| r.duration(c)).sum();
        assert_eq!(f.num_frames(), want);
        assert!(text.chars().all(|c| (2..=4).contains(&r.duration(c))));
        assert_eq!(f.dim(), 64);
    }

    #[test]
    fn noisy_frames_average_to_prototype() {
        let r = SpeechRenderer::default();
        let sigma = 0.1;
        let trials = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proto = r.prototype('q');
        let mut mean = vec![0.0; r.dim];
        for _ in 0..trials {
            let f = r.render("q", sigma, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(f.frame(0)) {
                *m += v / trials as f64;
            }
        }
        let bound = 3.0 * sigma / (trials as f64).sqrt();
        let within = mean.iter().zip(&proto).filter(|(m, p)| (*m - *p).abs() <= bound).count();
        // 3-sigma per coordinate: expect ~99.7% of the 64 coordinates inside
        assert!(within >= 62, "{within}/64 coordinates within {bound}");
    }

    #[test]
    fn distinct_characters_get_distinct_prototypes() {
        let r = SpeechRenderer::default();
        assert_ne!(r.prototype('a'), r.prototype('b'));
        assert_eq!(r.prototype('a'), r.prototype('a'));
    }
}
