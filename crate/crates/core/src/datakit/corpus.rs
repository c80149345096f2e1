//! Template-grammar text generator and the word cipher used for toy
//! translation.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub words: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub slots: Vec<String>,
    pub weight: f64,
}

/// A weighted choice of templates, each a sequence of category slots filled
/// independently from per-category word weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub categories: Vec<Category>,
    pub templates: Vec<Template>,
}

fn cat(name: &str, words: &[(&str, f64)]) -> Category {
    Category {
        name: name.to_string(),
        words: words.iter().map(|(w, p)| (w.to_string(), *p)).collect(),
    }
}

fn tpl(slots: &str, weight: f64) -> Template {
    Template {
        slots: slots.split_whitespace().map(str::to_string).collect(),
        weight,
    }
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar {
            categories: vec![
                cat("DET", &[("the", 3.0), ("a", 2.0), ("my", 1.0)]),
                cat(
                    "ADJ",
                    &[("big", 2.0), ("small", 2.0), ("red", 1.5), ("old", 1.5), ("happy", 1.0)],
                ),
                cat(
                    "NOUN",
                    &[
                        ("cat", 3.0),
                        ("dog", 3.0),
                        ("bird", 2.0),
                        ("fish", 2.0),
                        ("horse", 1.5),
                        ("girl", 1.5),
                        ("boy", 1.5),
                    ],
                ),
                cat(
                    "VERB",
                    &[("sees", 3.0), ("likes", 2.0), ("chases", 2.0), ("finds", 1.5), ("hears", 1.5)],
                ),
                cat("IVERB", &[("runs", 2.0), ("sleeps", 2.0), ("sings", 1.0), ("jumps", 1.0)]),
                cat("ADV", &[("now", 1.0), ("often", 1.0), ("today", 1.0)]),
                cat("PREP", &[("near", 1.0), ("with", 1.0), ("under", 1.0)]),
            ],
            templates: vec![
                tpl("DET NOUN IVERB", 2.0),
                tpl("DET NOUN VERB DET NOUN", 3.0),
                tpl("DET ADJ NOUN VERB DET NOUN", 2.0),
                tpl("DET NOUN IVERB ADV", 1.5),
                tpl("DET ADJ NOUN IVERB PREP DET NOUN", 1.5),
            ],
        }
    }
}

impl Grammar {
    fn category(&self, name: &str) -> Result<&Category> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("grammar slot {name:?} has no category")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("grammar has no templates".into()));
        }
        for t in &self.templates {
            if t.slots.is_empty() || !(t.weight > 0.0) {
                return Err(Error::Config("grammar template must be non-empty with positive weight".into()));
            }
            for s in &t.slots {
                let c = self.category(s)?;
                if c.words.is_empty() || c.words.iter().any(|(_, w)| !(*w > 0.0)) {
                    return Err(Error::Config(format!("category {s:?} needs positive word weights")));
                }
            }
        }
        Ok(())
    }

    /// Every distinct word the grammar can emit.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .categories
            .iter()
            .flat_map(|c| c.words.iter().map(|(w, _)| w.clone()))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Expected relative frequency of each word in generated text.
    pub fn unigram_distribution(&self) -> Result<BTreeMap<String, f64>> {
        self.validate()?;
        let total_w: f64 = self.templates.iter().map(|t| t.weight).sum();
        let mut expected: BTreeMap<String, f64> = BTreeMap::new();
        let mut expected_len = 0.0;
        for t in &self.templates {
            let pt = t.weight / total_w;
            expected_len += pt * t.slots.len() as f64;
            for s in &t.slots {
                let c = self.category(s)?;
                let cw: f64 = c.words.iter().map(|(_, w)| w).sum();
                for (w, wt) in &c.words {
                    *expected.entry(w.clone()).or_default() += pt * wt / cw;
                }
            }
        }
        for v in expected.values_mut() {
            *v /= expected_len;
        }
        Ok(expected)
    }
}

struct CompiledGrammar<'g> {
    templates: WeightedIndex<f64>,
    slots: Vec<Vec<(&'g Category, WeightedIndex<f64>)>>,
}

impl<'g> CompiledGrammar<'g> {
    fn new(g: &'g Grammar) -> Result<Self> {
        g.validate()?;
        let templates = WeightedIndex::new(g.templates.iter().map(|t| t.weight))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut slots = Vec::new();
        for t in &g.templates {
            let mut row = Vec::new();
            for s in &t.slots {
                let c = g.category(s)?;
                let wi = WeightedIndex::new(c.words.iter().map(|(_, w)| *w))
                    .map_err(|e| Error::Config(e.to_string()))?;
                row.push((c, wi));
            }
            slots.push(row);
        }
        Ok(CompiledGrammar { templates, slots })
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let t = self.templates.sample(rng);
        self.slots[t]
            .iter()
            .map(|(c, wi)| c.words[wi.sample(rng)].0.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Generates `n` sentences, deterministic under `seed`.
pub fn synth_text_corpus(seed: u64, n: usize, grammar: &Grammar) -> Result<Vec<String>> {
    let compiled = CompiledGrammar::new(grammar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| compiled.sentence(&mut rng)).collect())
}

/// Generates `n` (foreign, english) sentence pairs via [`cipher`].
pub fn synth_parallel_corpus(seed: u64, n: usize, grammar: &Grammar) -> Result<Vec<(String, String)>> {
    Ok(synth_text_corpus(seed, n, grammar)?
        .into_iter()
        .map(|s| (cipher(&s), s))
        .collect())
}

const LETTER_SHIFT: u8 = 7;
const FOREIGN_SUFFIX: char = 'o';

fn shift_letter(c: char, by: u8) -> char {
    if c.is_ascii_lowercase() {
        (((c as u8 - b'a' + by) % 26) + b'a') as char
    } else {
        c
    }
}

fn swap_adjacent_pairs(words: &mut [String]) {
    for pair in words.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
}

/// Toy "translation": every word is respelled with a fixed letter
/// substitution plus a suffix, then adjacent word pairs swap places.
pub fn cipher(sentence: &str) -> String {
    let mut words: Vec<String> = sentence
        .split_whitespace()
        .map(|w| {
            let mut s: String = w.chars().map(|c| shift_letter(c, LETTER_SHIFT)).collect();
            s.push(FOREIGN_SUFFIX);
            s
        })
        .collect();
    swap_adjacent_pairs(&mut words);
    words.join(" ")
}

/// Inverse of [`cipher`].
pub fn decipher(sentence: &str) -> String {
    let mut words: Vec<String> = sentence
        .split_whitespace()
        .map(|w| {
            let stem = w.strip_suffix(FOREIGN_SUFFIX).unwrap_or(w);
            stem.chars().map(|c| shift_letter(c, 26 - LETTER_SHIFT)).collect()
        })
        .collect();
    swap_adjacent_pairs(&mut words);
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let g = Grammar::default();
        let a = synth_text_corpus(42, 200, &g).unwrap();
        let b = synth_text_corpus(42, 200, &g).unwrap();
        assert_eq!(a, b);
        let c = synth_text_corpus(43, 200, &g).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cipher_is_invertible_and_changes_vocabulary() {
        let g = Grammar::default();
        let english = g.words();
        for (foreign, s) in synth_parallel_corpus(1, 500, &g).unwrap() {
            assert_eq!(decipher(&foreign), s);
            assert_eq!(foreign.split_whitespace().count(), s.split_whitespace().count());
            for w in foreign.split_whitespace() {
                assert!(!english.contains(&w.to_string()), "{w} leaks into foreign side");
            }
        }
    }

    #[test]
    fn unigram_frequencies_match_grammar_weights() {
        let g = Grammar::default();
        let expected = g.unigram_distribution().unwrap();
        let total: f64 = expected.values().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let corpus = synth_text_corpus(2024, 100_000, &g).unwrap();
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        let mut n = 0.0;
        for line in &corpus {
            for w in line.split_whitespace() {
                *counts.entry(w).or_default() += 1.0;
                n += 1.0;
            }
        }
        // total variation distance between empirical and expected unigrams
        let tv: f64 = expected
            .iter()
            .map(|(w, p)| (counts.get(w.as_str()).copied().unwrap_or(0.0) / n - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.02, "total variation {tv}");
        assert_eq!(counts.len(), expected.len());
    }

    #[test]
    fn invalid_grammar_is_rejected() {
        let mut g = Grammar::default();
        g.templates.push(tpl("MISSING", 1.0));
        assert!(synth_text_corpus(0, 1, &g).is_err());
    }
}
