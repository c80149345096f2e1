use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::datakit::{Batch, BatchInput, PreparedInput};
use crate::error::{Error, Result};
use crate::model::{FrozenMemory, FrozenState, Model};
use crate::numerics::Graph;
use crate::tokenizer::{TokenId, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Hard cap on output length; `None` uses twice the input length plus ten.
    #[serde(default)]
    pub max_len: Option<usize>,
    /// Added to a hypothesis score once per emitted token.
    #[serde(default)]
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 1,
            max_len: None,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn beam(beam: usize) -> Self {
        DecodeConfig {
            beam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, input_len: usize) -> usize {
        self.max_len.unwrap_or(2 * input_len + 10)
    }
}

/// Next-token scoring for a left-to-right search.
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    /// Log-probabilities over the vocabulary, and the successor state, for
    /// each `(state, previous token)`.
    fn step(&self, items: &[(&Self::State, TokenId)]) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, without the end marker.
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities plus the length penalty.
    pub score: f64,
    pub finished: bool,
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

struct Live<S> {
    tokens: Vec<TokenId>,
    score: f64,
    state: S,
}

/// Beam search returning the best hypothesis found by any width up to
/// `beam`, so the returned score never falls as the beam widens. With
/// `eos = None` every hypothesis runs to `max_len`.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
    eos: Option<TokenId>,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut best = fixed_width_search(scorer, 1, max_len, length_penalty, eos)?;
    for width in 2..=beam {
        let h = fixed_width_search(scorer, width, max_len, length_penalty, eos)?;
        if rank((h.score, &h.tokens), (best.score, &best.tokens)) == Ordering::Less {
            best = h;
        }
    }
    Ok(best)
}

/// One pass of standard beam search at a single width.
pub fn fixed_width_search<S: StepScorer>(
    scorer: &S,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
    eos: Option<TokenId>,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state: scorer.initial()?,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let items: Vec<(&S::State, TokenId)> = live
            .iter()
            .map(|h| (&h.state, h.tokens.last().copied().unwrap_or(BOS)))
            .collect();
        let scored = scorer.step(&items)?;
        let mut cands: Vec<(f64, Vec<TokenId>, usize)> = Vec::new();
        for (i, (lp, _)) in scored.iter().enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                let mut t = live[i].tokens.clone();
                t.push(v as TokenId);
                cands.push((live[i].score + l + length_penalty, t, i));
            }
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        let states: Vec<S::State> = scored.into_iter().map(|(_, s)| s).collect();
        let mut next = Vec::with_capacity(beam);
        for (score, mut tokens, parent) in cands.into_iter().take(beam) {
            if eos.is_some() && tokens.last().copied() == eos {
                tokens.pop();
                done.push(Hypothesis {
                    tokens,
                    score,
                    finished: true,
                });
            } else {
                next.push(Live {
                    tokens,
                    score,
                    state: states[parent].clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // with a non-positive penalty, live scores can only fall
        if length_penalty <= 0.0 && !done.is_empty() {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.score < best_done) {
                break;
            }
        }
    }
    done.extend(live.into_iter().map(|h| Hypothesis {
        tokens: h.tokens,
        score: h.score,
        finished: false,
    }));
    done.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    Ok(done.swap_remove(0))
}

/// Scores one encoded input with the model's decoder.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: FrozenMemory,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, task: usize, input: &PreparedInput) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Config("cannot decode an empty input".into()));
        }
        let n = input.len();
        let bi = match input {
            PreparedInput::Frames(f) => BatchInput::Frames {
                data: f.data().to_vec(),
                dim: f.dim(),
            },
            PreparedInput::Tokens(t) => BatchInput::Tokens { ids: t.clone() },
        };
        Ok(ModelScorer {
            model,
            memory: model.encode_frozen(task, &bi, &[n], n)?,
        })
    }
}

/// Decoder state of one hypothesis: the frozen state and the row within it.
#[derive(Clone)]
pub struct RowState(std::rc::Rc<FrozenState>, usize);

impl StepScorer for ModelScorer<'_> {
    type State = RowState;

    fn initial(&self) -> Result<RowState> {
        Ok(RowState(std::rc::Rc::new(self.model.frozen_initial_state(1)), 0))
    }

    fn step(&self, items: &[(&RowState, TokenId)]) -> Result<Vec<(Vec<f64>, RowState)>> {
        let mut out = Vec::with_capacity(items.len());
        // hypotheses usually share one parent state object per step
        let mut i = 0;
        while i < items.len() {
            let parent = &items[i].0 .0;
            let mut j = i;
            while j < items.len() && std::rc::Rc::ptr_eq(&items[j].0 .0, parent) {
                j += 1;
            }
            let group = &items[i..j];
            let rows: Vec<usize> = group.iter().map(|(s, _)| s.1).collect();
            let prev: Vec<TokenId> = group.iter().map(|(_, t)| *t).collect();
            let (lp, next) = self
                .model
                .step_log_probs(&self.memory, &vec![0; rows.len()], parent, &rows, &prev)?;
            let next = std::rc::Rc::new(next);
            for (k, row) in lp.data().chunks(lp.shape()[1]).enumerate() {
                out.push((row.to_vec(), RowState(next.clone(), k)));
            }
            i = j;
        }
        Ok(out)
    }
}

/// Decodes one input with the given configuration.
pub fn beam_decode(model: &Model, task: usize, input: &PreparedInput, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let scorer = ModelScorer::new(model, task, input)?;
    beam_search(&scorer, cfg.beam, cfg.max_len_for(input.len()), cfg.length_penalty, Some(EOS))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a whole batch at once; returns token sequences without
/// the end marker.
pub fn greedy_decode_batch(model: &Model, batch: &Batch, max_len: Option<usize>) -> Result<Vec<Vec<TokenId>>> {
    let mem = model.encode_frozen(batch.task, &batch.input, &batch.input_lengths, batch.max_input)?;
    let b = batch.len();
    let limits: Vec<usize> = batch
        .input_lengths
        .iter()
        .map(|&n| max_len.unwrap_or(2 * n + 10))
        .collect();
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); b];
    let mut active: Vec<usize> = (0..b).filter(|&r| limits[r] > 0).collect();
    let mut state = model.frozen_initial_state(b);
    let mut state_rows: Vec<usize> = (0..b).collect();
    let mut prev = vec![BOS; active.len()];
    while !active.is_empty() {
        let rows: Vec<usize> = active.iter().map(|&r| state_rows[r]).collect();
        let (lp, next) = model.step_log_probs(&mem, &active, &state, &rows, &prev)?;
        let v = lp.shape()[1];
        let mut still = Vec::new();
        let mut still_prev = Vec::new();
        for (k, &r) in active.iter().enumerate() {
            let tok = argmax(&lp.data()[k * v..(k + 1) * v]) as TokenId;
            state_rows[r] = k;
            if tok == EOS {
                continue;
            }
            out[r].push(tok);
            if out[r].len() < limits[r] {
                still.push(r);
                still_prev.push(tok);
            }
        }
        state = next;
        active = still;
        prev = still_prev;
    }
    Ok(out)
}

/// Exponentiated mean token negative log-likelihood over batches.
pub fn perplexity(model: &Model, batches: &[Batch]) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for b in batches {
        let mut g = Graph::new();
        let out = model.forward_nll(&mut g, b)?;
        nll += g.value(out.total).data()[0];
        tokens += out.tokens;
    }
    if tokens == 0 {
        return Err(Error::Config("perplexity over no tokens".into()));
    }
    Ok((nll / tokens as f64).exp())
}
