use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Accumulates edit counts over a corpus; the rate is total edits over total
/// reference length.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorCounter {
    pub edits: usize,
    pub reference_len: usize,
}

impl ErrorCounter {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) -> Result<()> {
        if reference.is_empty() {
            return Err(Error::EmptyReference);
        }
        self.edits += edit_distance(reference, hypothesis);
        self.reference_len += reference.len();
        Ok(())
    }

    pub fn rate(&self) -> Result<f64> {
        if self.reference_len == 0 {
            return Err(Error::EmptyReference);
        }
        Ok(self.edits as f64 / self.reference_len as f64)
    }
}

/// Word error rate of one hypothesis against one reference.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let mut c = ErrorCounter::default();
    c.add(&r, &h)?;
    c.rate()
}

/// Word error rate over whitespace-split sentences.
pub fn wer_str(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

pub fn token_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    let mut c = ErrorCounter::default();
    c.add(reference, hypothesis)?;
    c.rate()
}

pub const BLEU_MAX_ORDER: usize = 4;

fn ngram_counts<T: Hash + Eq>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU (0 to 100) with one reference per hypothesis, clipped n-gram
/// precisions up to order 4, add-one smoothing on orders above one, and the
/// usual brevity penalty.
pub fn bleu<T: Hash + Eq>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Config(format!(
            "bleu needs one reference per hypothesis ({} vs {})",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let (mut ref_len, mut hyp_len) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=BLEU_MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..BLEU_MAX_ORDER {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (bp + log_p / BLEU_MAX_ORDER as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer_str("a b c", "a b c").unwrap(), 0.0);
        assert_eq!(wer_str("a b c", "a x c d").unwrap(), 2.0 / 3.0);
        assert_eq!(wer_str("a b c", "").unwrap(), 1.0);
        assert!(matches!(wer_str("", "a"), Err(Error::EmptyReference)));
    }

    #[test]
    fn ter_equals_wer_for_whole_word_tokens() {
        let r = words("the cat sees a dog");
        let h = words("the dog sees dog now");
        let ids = |s: &[&str]| -> Vec<u32> { s.iter().map(|w| w.bytes().map(u32::from).sum()).collect() };
        assert_eq!(token_error_rate(&ids(&r), &ids(&h)).unwrap(), wer(&r, &h).unwrap());
        assert_eq!(token_error_rate(&[3u32, 4], &[3, 4]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_examples() {
        let refs = vec![words("the cat sees the dog"), words("a bird sings now")];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);

        // every n-gram of the shorter hypothesis appears in the reference
        let r = vec![words("a b c d e f")];
        let h = vec![words("a b c d")];
        let smoothed = (1.0f64 * 1.0 * 1.0 * 1.0).powf(0.25);
        let expected = 100.0 * smoothed * (1.0 - 6.0 / 4.0f64).exp();
        assert!((bleu(&r, &h).unwrap() - expected).abs() < 1e-9);

        assert_eq!(bleu(&r, &[vec![]]).unwrap(), 0.0);
        assert!(bleu(&r, &[]).is_err());
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8),
            c in prop::collection::vec(0u8..4, 0..8),
        ) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
            prop_assert_eq!(ab == 0, a == b);
            if !a.is_empty() {
                let rate = token_error_rate(&a, &b).unwrap();
                let scaled = rate * a.len() as f64;
                prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            }
        }

        #[test]
        fn bleu_is_bounded_and_order_invariant(
            pairs in prop::collection::vec(
                (prop::collection::vec(0u8..5, 1..8), prop::collection::vec(0u8..5, 0..8)),
                1..6,
            ),
        ) {
            let (r, h): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let s = bleu(&r, &h).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
            let (rr, hr): (Vec<_>, Vec<_>) = pairs.into_iter().rev().unzip();
            prop_assert!((bleu(&rr, &hr).unwrap() - s).abs() < 1e-9);
        }
    }
}
