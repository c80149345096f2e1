//! Subword vocabularies shared by every task.
//!
//! Words are split on whitespace and each word is spelled as a word-start
//! marker followed by its characters; byte-pair merges are learned on top of
//! that alphabet. The marker makes decoding exact up to whitespace
//! normalization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const UNK: TokenId = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// Marks the start of every word.
pub const WORD_MARKER: char = '\u{2581}';

/// Desk-scale default vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 400;

const HEADER_TAG: &str = "#usted-vocab";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Char,
    #[default]
    Bpe,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Char => "char",
            Scheme::Bpe => "bpe",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Scheme::Char),
            "bpe" => Ok(Scheme::Bpe),
            other => Err(Error::Vocab(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Bijective token/id mapping plus the ordered merge rules that produced the
/// multi-character tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    scheme: Scheme,
    corpus_hash: String,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    /// (left, right) -> (rank, merged id)
    merges: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    merge_pairs: Vec<(TokenId, TokenId)>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn num_merges(&self) -> usize {
        self.merge_pairs.len()
    }

    fn push_token(&mut self, token: String) -> TokenId {
        let id = self.tokens.len() as TokenId;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    fn base(scheme: Scheme, corpus_hash: String, alphabet: &BTreeSet<char>) -> Self {
        let mut v = Vocabulary {
            scheme,
            corpus_hash,
            tokens: Vec::new(),
            index: HashMap::new(),
            merges: HashMap::new(),
            merge_pairs: Vec::new(),
        };
        for s in SPECIALS {
            v.push_token(s.to_string());
        }
        v.push_token(WORD_MARKER.to_string());
        for &c in alphabet {
            if c != WORD_MARKER {
                v.push_token(c.to_string());
            }
        }
        v
    }

    fn add_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let merged = format!("{}{}", self.tokens[left as usize], self.tokens[right as usize]);
        let id = self.push_token(merged);
        self.merges.insert((left, right), (self.merge_pairs.len(), id));
        self.merge_pairs.push((left, right));
        id
    }

    fn spell(&self, word: &str) -> Vec<TokenId> {
        let marker = self.index[&WORD_MARKER.to_string()];
        let mut out = Vec::with_capacity(word.chars().count() + 1);
        out.push(marker);
        let mut buf = [0u8; 4];
        for c in word.chars() {
            out.push(self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK));
        }
        out
    }

    fn apply_merges(&self, symbols: &mut Vec<TokenId>) {
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.get(&(w[0], w[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((_, i, id)) = best else { break };
            symbols[i] = id;
            symbols.remove(i + 1);
        }
    }

    /// Segments whitespace-separated words. Never emits PAD, BOS, EOS or MASK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut symbols = self.spell(word);
            self.apply_merges(&mut symbols);
            out.extend(symbols);
        }
        out
    }

    /// Encodes a sequence of words, mapping each entry equal to `mask_word`
    /// to a single MASK token.
    pub fn encode_words(&self, words: &[&str], mask_word: Option<&str>) -> Vec<TokenId> {
        let mut out = Vec::new();
        for &w in words {
            if Some(w) == mask_word {
                out.push(MASK);
                continue;
            }
            let mut symbols = self.spell(w);
            self.apply_merges(&mut symbols);
            out.extend(symbols);
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace normalization.
    /// PAD, BOS and EOS are dropped; MASK and UNK render as their names.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut raw = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or(Error::IndexOutOfRange {
                    id: id as usize,
                    limit: self.len(),
                })?;
            match id {
                PAD | BOS | EOS => {}
                MASK => {
                    raw.push(' ');
                    raw.push_str(tok);
                    raw.push(' ');
                }
                _ => raw.push_str(tok),
            }
        }
        let spaced = raw.replace(WORD_MARKER, " ");
        Ok(spaced.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{HEADER_TAG} scheme={} corpus={} size={}",
            self.scheme,
            self.corpus_hash,
            self.len()
        )?;
        let merged_from: HashMap<TokenId, (TokenId, TokenId)> =
            self.merges.iter().map(|(&pair, &(_, id))| (id, pair)).collect();
        for (id, tok) in self.tokens.iter().enumerate() {
            match merged_from.get(&(id as TokenId)) {
                Some(&(l, r)) => writeln!(w, "{tok}\t{} {}", self.tokens[l as usize], self.tokens[r as usize])?,
                None => writeln!(w, "{tok}")?,
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("vocabulary", "empty file"))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(Error::format("vocabulary", format!("bad header {header:?}")));
        }
        let mut scheme = None;
        let mut corpus_hash = String::new();
        let mut size = None;
        for f in fields {
            match f.split_once('=') {
                Some(("scheme", s)) => scheme = Some(s.parse::<Scheme>()?),
                Some(("corpus", h)) => corpus_hash = h.to_string(),
                Some(("size", n)) => {
                    size = Some(n.parse::<usize>().map_err(|e| Error::format("vocabulary", e.to_string()))?)
                }
                _ => return Err(Error::format("vocabulary", format!("bad header field {f:?}"))),
            }
        }
        let scheme = scheme.ok_or_else(|| Error::format("vocabulary", "missing scheme"))?;
        let mut v = Vocabulary {
            scheme,
            corpus_hash,
            tokens: Vec::new(),
            index: HashMap::new(),
            merges: HashMap::new(),
            merge_pairs: Vec::new(),
        };
        for line in lines {
            let line = line?;
            match line.split_once('\t') {
                Some((tok, pair)) => {
                    let (l, r) = pair
                        .split_once(' ')
                        .ok_or_else(|| Error::format("vocabulary", format!("bad merge line {line:?}")))?;
                    let (l, r) = match (v.id(l), v.id(r)) {
                        (Some(l), Some(r)) => (l, r),
                        _ => return Err(Error::format("vocabulary", format!("merge of unknown tokens {line:?}"))),
                    };
                    let id = v.add_merge(l, r);
                    if v.tokens[id as usize] != tok {
                        return Err(Error::format("vocabulary", format!("merge does not spell token {line:?}")));
                    }
                }
                None => {
                    if v.index.contains_key(&line) {
                        return Err(Error::format("vocabulary", format!("duplicate token {line:?}")));
                    }
                    v.push_token(line);
                }
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if v.tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format("vocabulary", "reserved specials missing"));
            }
        }
        if size.is_some_and(|n| n != v.len()) {
            return Err(Error::format("vocabulary", "size does not match header"));
        }
        Ok(v)
    }

    pub fn to_file_string(&self) -> String {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("vocabulary is utf-8")
    }
}

/// Hex SHA-256 of the corpus lines joined by newlines.
pub fn corpus_hash<S: AsRef<str>>(corpus: &[S]) -> String {
    let mut h = Sha256::new();
    for (i, line) in corpus.iter().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(line.as_ref().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Learns a vocabulary from `corpus`.
///
/// `char` yields specials plus the alphabet and ignores `target_size`;
/// `bpe` merges the most frequent adjacent pair (ties to the
/// lexicographically smallest pair) until exactly `target_size` entries.
pub fn train_subword<S: AsRef<str>>(corpus: &[S], target_size: usize, scheme: Scheme) -> Result<Vocabulary> {
    if corpus.iter().all(|l| l.as_ref().trim().is_empty()) {
        return Err(Error::Vocab("empty training corpus".into()));
    }
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut alphabet = BTreeSet::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
            alphabet.extend(w.chars());
        }
    }
    let mut vocab = Vocabulary::base(scheme, corpus_hash(corpus), &alphabet);
    if scheme == Scheme::Char {
        return Ok(vocab);
    }
    if target_size <= vocab.len() {
        return Err(Error::Vocab(format!(
            "target size {target_size} must exceed the base alphabet of {} entries",
            vocab.len()
        )));
    }

    let mut words: Vec<(Vec<TokenId>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (vocab.spell(w), f))
        .collect();
    while vocab.len() < target_size {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (symbols, f) in &words {
            for w in symbols.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&((l, r), _)| {
                let joined = format!("{}{}", vocab.tokens[l as usize], vocab.tokens[r as usize]);
                !vocab.index.contains_key(&joined)
            })
            .max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(&cb).then_with(|| {
                    let key = |(l, r): (TokenId, TokenId)| (vocab.tokens[l as usize].clone(), vocab.tokens[r as usize].clone());
                    key(pb).cmp(&key(pa))
                })
            });
        let Some(((l, r), _)) = best else {
            return Err(Error::VocabTooLarge {
                requested: target_size,
                max: vocab.len(),
            });
        };
        let id = vocab.add_merge(l, r);
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == l && symbols[i + 1] == r {
                    symbols[i] = id;
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids_of(v: &Vocabulary, toks: &[&str]) -> Vec<TokenId> {
        toks.iter().map(|t| v.id(t).unwrap()).collect()
    }

    #[test]
    fn char_scheme_is_specials_plus_marker_plus_alphabet() {
        let v = train_subword(&["ab"], 0, Scheme::Char).unwrap();
        assert_eq!(v.len(), 8);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.token(i as TokenId), Some(*s));
        }
        assert_eq!(v.token(5), Some("\u{2581}"));
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.token(7), Some("b"));
    }

    /// Counts adjacent pairs by brute force over the spelled corpus.
    fn brute_force_best_pair(corpus: &[&str]) -> (String, String) {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                let mut sym = vec![WORD_MARKER.to_string()];
                sym.extend(w.chars().map(|c| c.to_string()));
                for i in 0..sym.len() - 1 {
                    *counts.entry((sym[i].clone(), sym[i + 1].clone())).or_default() += 1;
                }
            }
        }
        let max = *counts.values().max().unwrap();
        counts.into_iter().find(|(_, c)| *c == max).unwrap().0
    }

    #[test]
    fn first_bpe_merge_is_most_frequent_pair() {
        let corpus = ["aaab", "aaac"];
        let oracle = brute_force_best_pair(&corpus);
        assert_eq!(oracle, ("a".to_string(), "a".to_string()));
        let base = train_subword(&corpus, 0, Scheme::Char).unwrap().len();
        let v = train_subword(&corpus, base + 1, Scheme::Bpe).unwrap();
        assert_eq!(v.len(), base + 1);
        assert_eq!(v.token(base as TokenId), Some("aa"));
    }

    #[test]
    fn bpe_ties_break_by_lexicographic_pair() {
        // every pair occurs once; the smallest is ("a", "b")
        let corpus = ["ab", "cd"];
        let base = train_subword(&corpus, 0, Scheme::Char).unwrap().len();
        let v = train_subword(&corpus, base + 1, Scheme::Bpe).unwrap();
        assert_eq!(v.token(base as TokenId), Some("ab"));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "a dog sat on a log", "the dog ate"];
        let a = train_subword(&corpus, 30, Scheme::Bpe).unwrap();
        let b = train_subword(&corpus, 30, Scheme::Bpe).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    #[test]
    fn unreachable_target_reports_maximum() {
        let corpus = ["ab"];
        match train_subword(&corpus, 100, Scheme::Bpe) {
            // base 8 + "▁a" + "▁ab"
            Err(Error::VocabTooLarge { requested: 100, max }) => assert_eq!(max, 10),
            other => panic!("{other:?}"),
        }
        assert!(train_subword(&corpus, 8, Scheme::Bpe).is_err());
        assert!(train_subword(&[""], 20, Scheme::Bpe).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = train_subword(&["abc abd"], 12, Scheme::Bpe).unwrap();
        assert!(v.encode("").is_empty());
        assert!(v.encode("   ").is_empty());
        let ids = v.encode("abz");
        assert!(ids.contains(&UNK));
        assert_eq!(v.decode(&ids).unwrap(), "ab<unk>");
        let ids = v.encode("  abc   abd ");
        assert_eq!(v.decode(&ids).unwrap(), "abc abd");
        assert!(v.decode(&[v.len() as TokenId]).is_err());
    }

    #[test]
    fn encode_words_maps_masked_word_to_one_token() {
        let v = train_subword(&["hello world"], 0, Scheme::Char).unwrap();
        let ids = v.encode_words(&["hello", "<mask>", "world"], Some("<mask>"));
        assert_eq!(ids.iter().filter(|&&t| t == MASK).count(), 1);
        assert_eq!(v.decode(&ids).unwrap(), "hello <mask> world");
        let plain = v.encode_words(&["hello"], None);
        assert_eq!(plain, ids_of(&v, &["\u{2581}", "h", "e", "l", "l", "o"]));
    }

    #[test]
    fn file_round_trip() {
        let corpus = ["the cat sat on the mat", "a dog sat on a log"];
        let v = train_subword(&corpus, 35, Scheme::Bpe).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("#usted-vocab scheme=bpe corpus="));
        let back = Vocabulary::load(text.as_bytes()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.corpus_hash(), corpus_hash(&corpus));
    }

    fn line_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-f]{1,6}", 1..8).prop_map(|w| w.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn decode_inverts_encode(lines in prop::collection::vec(line_strategy(), 125..126)) {
            let v = train_subword(&lines, 40, Scheme::Bpe).unwrap();
            for line in &lines {
                let ids = v.encode(line);
                prop_assert!(ids.iter().all(|&t| t as usize >= NUM_SPECIALS));
                prop_assert_eq!(&v.decode(&ids).unwrap(), line);
                prop_assert_eq!(v.encode(line), ids);
            }
        }
    }
}
