use crate::datakit::{BatchInput, Modality, PreparedInput};
use crate::datakit::Batch;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, Tensor, Var};
use crate::tokenizer::{TokenId, BOS};

use super::config::ModelConfig;
use super::params::{Init, ParamStore};

#[derive(Clone, Debug)]
struct LstmIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BiLstmIds {
    fwd: LstmIds,
    bwd: LstmIds,
}

#[derive(Clone, Debug)]
struct TaskIds {
    embed: Option<ParamId>,
    adapter_w: ParamId,
    adapter_b: ParamId,
    layers: Vec<BiLstmIds>,
    task_embedding: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct HeadIds {
    w_query: ParamId,
    w_memory: ParamId,
    bias: ParamId,
    score: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    embed: ParamId,
    layers: Vec<LstmIds>,
    heads: Vec<HeadIds>,
    merge_w: ParamId,
    merge_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, N, 2h]`
    pub states: Var,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl Encoded {
    pub fn mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.lengths.len() * self.max_len);
        for &l in &self.lengths {
            m.extend((0..self.max_len).map(|n| n < l));
        }
        m
    }
}

/// Encoder states with per-head projected keys, ready for attention.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    keys: Vec<Var>,
    lengths: Vec<usize>,
    mask: Vec<bool>,
    batch: usize,
}

impl Memory {
    /// Copies the memory's values out of the graph.
    pub fn freeze(&self, g: &Graph) -> FrozenMemory {
        FrozenMemory {
            states: g.value(self.states).clone(),
            keys: self.keys.iter().map(|&k| g.value(k).clone()).collect(),
            lengths: self.lengths.clone(),
        }
    }
}

/// Encoder memory detached from its graph, for step-by-step decoding.
#[derive(Clone, Debug)]
pub struct FrozenMemory {
    states: Tensor,
    keys: Vec<Tensor>,
    lengths: Vec<usize>,
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let per = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("gathered shape matches data")
}

impl FrozenMemory {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Records the selected rows (repeats allowed) as constants in `g`.
    pub fn rows(&self, g: &mut Graph, rows: &[usize]) -> Memory {
        let n = self.states.shape()[1];
        let lengths: Vec<usize> = rows.iter().map(|&r| self.lengths[r]).collect();
        let mask = lengths.iter().flat_map(|&l| (0..n).map(move |i| i < l)).collect();
        Memory {
            states: g.constant(gather_rows(&self.states, rows)),
            keys: self.keys.iter().map(|k| g.constant(gather_rows(k, rows))).collect(),
            lengths,
            mask,
            batch: rows.len(),
        }
    }
}

/// Decoder state values detached from a graph.
#[derive(Clone, Debug)]
pub struct FrozenState {
    hidden: Vec<Tensor>,
    cell: Vec<Tensor>,
}

impl FrozenState {
    pub fn rows(&self, g: &mut Graph, rows: &[usize]) -> DecoderState {
        DecoderState {
            hidden: self.hidden.iter().map(|t| g.constant(gather_rows(t, rows))).collect(),
            cell: self.cell.iter().map(|t| g.constant(gather_rows(t, rows))).collect(),
        }
    }
}

/// Hidden and cell state of every decoder layer, each `[B, dh]`.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

impl DecoderState {
    pub fn freeze(&self, g: &Graph) -> FrozenState {
        FrozenState {
            hidden: self.hidden.iter().map(|&v| g.value(v).clone()).collect(),
            cell: self.cell.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

pub struct StepOutput {
    /// `[B, V]` unnormalized scores.
    pub logits: Var,
    pub state: DecoderState,
    /// Attention weights per head, each `[B, N]` row-major.
    pub attention: Vec<Vec<f64>>,
}

pub struct NllOutput {
    /// Scalar sum of token NLLs over the batch.
    pub total: Var,
    pub per_sample: Vec<f64>,
    pub tokens: usize,
}

/// The multitask attention encoder-decoder.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    tasks: Vec<TaskIds>,
    shared: Vec<BiLstmIds>,
    decoder: DecoderIds,
}

fn add_lstm(p: &mut ParamStore, prefix: &str, input: usize, hidden: usize, scale: f64, seed: u64) -> LstmIds {
    LstmIds {
        wx: p.add(format!("{prefix}.wx"), &[input, 4 * hidden], Init::Uniform(scale), seed),
        wh: p.add(format!("{prefix}.wh"), &[hidden, 4 * hidden], Init::Uniform(scale), seed),
        b: p.add(format!("{prefix}.b"), &[4 * hidden], Init::Zeros, seed),
    }
}

fn add_bilstm(p: &mut ParamStore, prefix: &str, input: usize, hidden: usize, scale: f64, seed: u64) -> BiLstmIds {
    BiLstmIds {
        fwd: add_lstm(p, &format!("{prefix}.fwd"), input, hidden, scale, seed),
        bwd: add_lstm(p, &format!("{prefix}.bwd"), input, hidden, scale, seed),
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (s, seed) = (config.init_scale, config.seed);
        let width = config.encoder_width();
        let mut p = ParamStore::default();
        let mut tasks = Vec::new();
        for t in &config.tasks {
            let pre = format!("task.{}", t.name);
            let embed = t
                .vocab_size
                .map(|v| p.add(format!("{pre}.embed"), &[v, config.input_dim], Init::Uniform(s), seed));
            let adapter_w = p.add(format!("{pre}.adapter.w"), &[config.input_dim, width], Init::Uniform(s), seed);
            let adapter_b = p.add(format!("{pre}.adapter.b"), &[width], Init::Zeros, seed);
            let layers = (0..config.modality_layers())
                .map(|i| add_bilstm(&mut p, &format!("{pre}.enc.{i}"), width, config.hidden, s, seed))
                .collect();
            let task_embedding = config
                .use_task_embedding
                .then(|| p.add(format!("{pre}.task_embedding"), &[width], Init::Zeros, seed));
            tasks.push(TaskIds {
                embed,
                adapter_w,
                adapter_b,
                layers,
                task_embedding,
            });
        }
        let shared = (0..config.shared_layers)
            .map(|i| add_bilstm(&mut p, &format!("shared.enc.{i}"), width, config.hidden, s, seed))
            .collect();
        let dh = config.decoder_hidden;
        let a = config.attention_dim;
        let embed = p.add("dec.embed".into(), &[config.output_vocab, config.decoder_embed], Init::Uniform(s), seed);
        let layers = (0..config.decoder_layers)
            .map(|i| {
                let input = if i == 0 { config.decoder_embed + width } else { dh };
                add_lstm(&mut p, &format!("dec.lstm.{i}"), input, dh, s, seed)
            })
            .collect();
        let heads = (0..config.attention_heads)
            .map(|i| HeadIds {
                w_query: p.add(format!("dec.att.{i}.w_query"), &[dh, a], Init::Uniform(s), seed),
                w_memory: p.add(format!("dec.att.{i}.w_memory"), &[width, a], Init::Uniform(s), seed),
                bias: p.add(format!("dec.att.{i}.bias"), &[a], Init::Zeros, seed),
                score: p.add(format!("dec.att.{i}.score"), &[a], Init::Uniform(s), seed),
            })
            .collect();
        let merge_w = p.add(
            "dec.att.merge.w".into(),
            &[config.attention_heads * width, width],
            Init::Uniform(s),
            seed,
        );
        let merge_b = p.add("dec.att.merge.b".into(), &[width], Init::Zeros, seed);
        let out_w = p.add("dec.out.w".into(), &[dh + width, config.output_vocab], Init::Uniform(s), seed);
        let out_b = p.add("dec.out.b".into(), &[config.output_vocab], Init::Zeros, seed);
        Ok(Model {
            config,
            params: p,
            tasks,
            shared,
            decoder: DecoderIds {
                embed,
                layers,
                heads,
                merge_w,
                merge_b,
                out_w,
                out_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id, self.params.get(id))
    }

    /// Name prefix of encoder layer `layer` (0-based, counted along the
    /// task's full path) for task `task`.
    pub fn encoder_layer_prefix(&self, task: usize, layer: usize) -> String {
        let m = self.config.modality_layers();
        if layer < m {
            format!("task.{}.enc.{layer}", self.config.tasks[task].name)
        } else {
            format!("shared.enc.{}", layer - m)
        }
    }

    fn lstm_direction(
        &self,
        g: &mut Graph,
        x: Var,
        lengths: &[usize],
        ids: &LstmIds,
        reverse: bool,
    ) -> Result<Var> {
        let (b, t, din) = match g.shape(x) {
            [b, t, d] => (*b, *t, *d),
            s => return Err(Error::shape("lstm", s, &[])),
        };
        let h = self.config.hidden;
        let flat = g.reshape(x, &[b * t, din])?;
        let wx = self.p(g, ids.wx);
        let wh = self.p(g, ids.wh);
        let bias = self.p(g, ids.b);
        let xw = g.matmul(flat, wx)?;
        let xw = g.add_row_bias(xw, bias)?;
        let xw = g.reshape(xw, &[b, t, 4 * h])?;
        let mut hs = g.constant(Tensor::zeros(&[b, h]));
        let mut cs = g.constant(Tensor::zeros(&[b, h]));
        let mut outputs = vec![hs; t];
        let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in steps {
            let xt = g.time_slice(xw, step)?;
            let rec = g.matmul(hs, wh)?;
            let gates = g.add(xt, rec)?;
            let hc = g.lstm_cell(gates, cs)?;
            let h_new = g.slice_cols(hc, 0, h)?;
            let c_new = g.slice_cols(hc, h, 2 * h)?;
            let mask: Vec<bool> = lengths.iter().map(|&l| step < l).collect();
            if mask.iter().all(|&m| m) {
                hs = h_new;
                cs = c_new;
            } else {
                hs = g.select_rows(&mask, h_new, hs)?;
                cs = g.select_rows(&mask, c_new, cs)?;
            }
            outputs[step] = hs;
        }
        let stacked = g.stack_time(&outputs)?;
        g.reshape(stacked, &[b * t, h])
    }

    fn bilstm(&self, g: &mut Graph, x: Var, lengths: &[usize], ids: &BiLstmIds) -> Result<Var> {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let f = self.lstm_direction(g, x, lengths, &ids.fwd, false)?;
        let r = self.lstm_direction(g, x, lengths, &ids.bwd, true)?;
        let both = g.concat_cols(&[f, r])?;
        g.reshape(both, &[b, t, 2 * self.config.hidden])
    }

    /// Adapter and task-specific layers, with the task embedding prepended
    /// when enabled.
    pub fn modality_encode(
        &self,
        g: &mut Graph,
        task: usize,
        input: &BatchInput,
        lengths: &[usize],
        max_len: usize,
    ) -> Result<Encoded> {
        let spec = self
            .config
            .tasks
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let ids = &self.tasks[task];
        let b = lengths.len();
        if b == 0 || lengths.iter().any(|&l| l == 0 || l > max_len) {
            return Err(Error::Config(format!("length mask {lengths:?} inconsistent with input of length {max_len}")));
        }
        let d = self.config.input_dim;
        let x = match (input, spec.modality) {
            (BatchInput::Frames { data, dim }, Modality::Speech) => {
                if *dim != d || data.len() != b * max_len * d {
                    return Err(Error::shape("encode", &[b, max_len, d], &[data.len() / dim.max(&1), *dim]));
                }
                g.constant(Tensor::new(vec![b * max_len, d], data.clone())?)
            }
            (BatchInput::Tokens { ids: toks }, Modality::Text) => {
                if toks.len() != b * max_len {
                    return Err(Error::shape("encode", &[b, max_len], &[toks.len()]));
                }
                let table = self.p(g, ids.embed.expect("text task has an embedding table"));
                let as_usize: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
                g.embedding(table, &as_usize)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "input modality does not match task {:?}",
                    spec.name
                )))
            }
        };
        let w = self.p(g, ids.adapter_w);
        let bias = self.p(g, ids.adapter_b);
        let a = g.matmul(x, w)?;
        let a = g.add_row_bias(a, bias)?;
        let mut h = g.reshape(a, &[b, max_len, self.config.encoder_width()])?;
        for layer in &ids.layers {
            h = self.bilstm(g, h, lengths, layer)?;
        }
        let mut lengths = lengths.to_vec();
        let mut max_len = max_len;
        if let Some(te) = ids.task_embedding {
            let row = self.p(g, te);
            h = g.prepend_row(h, row)?;
            lengths.iter_mut().for_each(|l| *l += 1);
            max_len += 1;
        }
        Ok(Encoded {
            states: h,
            lengths,
            max_len,
        })
    }

    /// Runs the shared context encoder over modality-encoder output.
    pub fn context_encode(&self, g: &mut Graph, modal: Encoded) -> Result<Encoded> {
        let mut h = modal.states;
        for layer in &self.shared {
            h = self.bilstm(g, h, &modal.lengths, layer)?;
        }
        Ok(Encoded { states: h, ..modal })
    }

    /// Modality encoder, optional task embedding, then the shared encoder.
    pub fn encode(
        &self,
        g: &mut Graph,
        task: usize,
        input: &BatchInput,
        lengths: &[usize],
        max_len: usize,
    ) -> Result<Encoded> {
        let modal = self.modality_encode(g, task, input, lengths, max_len)?;
        self.context_encode(g, modal)
    }

    /// Encodes one unpadded input.
    pub fn encode_one(&self, g: &mut Graph, task: usize, input: &PreparedInput) -> Result<Encoded> {
        let n = input.len();
        let bi = match input {
            PreparedInput::Frames(f) => BatchInput::Frames {
                data: f.data().to_vec(),
                dim: f.dim(),
            },
            PreparedInput::Tokens(t) => BatchInput::Tokens { ids: t.clone() },
        };
        self.encode(g, task, &bi, &[n], n)
    }

    /// Projects encoder states into per-head attention keys.
    pub fn memory(&self, g: &mut Graph, enc: &Encoded) -> Result<Memory> {
        let b = enc.lengths.len();
        let n = enc.max_len;
        let width = self.config.encoder_width();
        let flat = g.reshape(enc.states, &[b * n, width])?;
        let mut keys = Vec::with_capacity(self.decoder.heads.len());
        for head in &self.decoder.heads {
            let w = self.p(g, head.w_memory);
            let bias = self.p(g, head.bias);
            let k = g.matmul(flat, w)?;
            let k = g.add_row_bias(k, bias)?;
            keys.push(g.reshape(k, &[b, n, self.config.attention_dim])?);
        }
        Ok(Memory {
            states: enc.states,
            keys,
            lengths: enc.lengths.clone(),
            mask: enc.mask(),
            batch: b,
        })
    }

    /// Multi-head additive attention: per-head contexts are concatenated and
    /// merged back to the encoder width.
    pub fn attend(&self, g: &mut Graph, mem: &Memory, query: Var) -> Result<(Var, Vec<Vec<f64>>)> {
        let mut contexts = Vec::with_capacity(mem.keys.len());
        let mut weights = Vec::with_capacity(mem.keys.len());
        for (head, &keys) in self.decoder.heads.iter().zip(&mem.keys) {
            let wq = self.p(g, head.w_query);
            let score = self.p(g, head.score);
            let q = g.matmul(query, wq)?;
            let ctx = g.attention_head(keys, q, score, mem.states, &mem.mask)?;
            weights.push(g.attention_weights(ctx).expect("attention node").to_vec());
            contexts.push(ctx);
        }
        let joined = g.concat_cols(&contexts)?;
        let w = self.p(g, self.decoder.merge_w);
        let b = self.p(g, self.decoder.merge_b);
        let merged = g.matmul(joined, w)?;
        Ok((g.add_row_bias(merged, b)?, weights))
    }

    pub fn initial_state(&self, g: &mut Graph, batch: usize) -> DecoderState {
        let dh = self.config.decoder_hidden;
        let zeros: Vec<Var> = (0..self.config.decoder_layers)
            .map(|_| g.constant(Tensor::zeros(&[batch, dh])))
            .collect();
        DecoderState {
            hidden: zeros.clone(),
            cell: zeros,
        }
    }

    /// One decoder step conditioned on the previous tokens and the context
    /// computed from the top layer's previous hidden state.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        mem: &Memory,
        prev: &[TokenId],
        state: &DecoderState,
    ) -> Result<StepOutput> {
        if prev.len() != mem.batch {
            return Err(Error::shape("decode_step", &[mem.batch], &[prev.len()]));
        }
        let table = self.p(g, self.decoder.embed);
        let ids: Vec<usize> = prev.iter().map(|&t| t as usize).collect();
        let emb = g.embedding(table, &ids)?;
        let top = *state.hidden.last().expect("decoder has layers");
        let (context, attention) = self.attend(g, mem, top)?;
        let mut x = g.concat_cols(&[emb, context])?;
        let dh = self.config.decoder_hidden;
        let mut hidden = Vec::with_capacity(self.decoder.layers.len());
        let mut cell = Vec::with_capacity(self.decoder.layers.len());
        for (l, ids) in self.decoder.layers.iter().enumerate() {
            let wx = self.p(g, ids.wx);
            let wh = self.p(g, ids.wh);
            let b = self.p(g, ids.b);
            let a = g.matmul(x, wx)?;
            let r = g.matmul(state.hidden[l], wh)?;
            let gates = g.add(a, r)?;
            let gates = g.add_row_bias(gates, b)?;
            let hc = g.lstm_cell(gates, state.cell[l])?;
            let h = g.slice_cols(hc, 0, dh)?;
            let c = g.slice_cols(hc, dh, 2 * dh)?;
            hidden.push(h);
            cell.push(c);
            x = h;
        }
        let feat = g.concat_cols(&[x, context])?;
        let w = self.p(g, self.decoder.out_w);
        let b = self.p(g, self.decoder.out_b);
        let logits = g.matmul(feat, w)?;
        let logits = g.add_row_bias(logits, b)?;
        Ok(StepOutput {
            logits,
            state: DecoderState { hidden, cell },
            attention,
        })
    }

    /// Teacher-forced negative log-likelihood of the batch targets.
    pub fn forward_nll(&self, g: &mut Graph, batch: &Batch) -> Result<NllOutput> {
        let enc = self.encode(g, batch.task, &batch.input, &batch.input_lengths, batch.max_input)?;
        let mem = self.memory(g, &enc)?;
        let b = batch.len();
        let u_max = batch.max_target;
        let mut state = self.initial_state(g, b);
        let mut prev = vec![BOS; b];
        let mut per_sample = vec![0.0; b];
        let mut total: Option<Var> = None;
        for u in 0..u_max {
            let targets: Vec<TokenId> = (0..b).map(|r| batch.targets[r * u_max + u]).collect();
            let mask: Vec<bool> = batch.target_lengths.iter().map(|&l| u < l).collect();
            if !mask.iter().any(|&m| m) {
                break;
            }
            let out = self.decode_step(g, &mem, &prev, &state)?;
            let t_usize: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
            let nll = g.cross_entropy(out.logits, &t_usize, &mask)?;
            for (acc, v) in per_sample.iter_mut().zip(g.value(nll).data()) {
                *acc += v;
            }
            let s = g.sum(nll);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
            state = out.state;
            prev = targets;
        }
        if let Some(bad) = per_sample.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { sample: bad });
        }
        let total = total.ok_or_else(|| Error::Config("batch has no target tokens".into()))?;
        Ok(NllOutput {
            total,
            per_sample,
            tokens: batch.num_target_tokens(),
        })
    }

    /// Encodes a batch and detaches the attention memory.
    pub fn encode_frozen(&self, task: usize, input: &BatchInput, lengths: &[usize], max_len: usize) -> Result<FrozenMemory> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, task, input, lengths, max_len)?;
        Ok(self.memory(&mut g, &enc)?.freeze(&g))
    }

    /// Zero decoder state for `batch` rows.
    pub fn frozen_initial_state(&self, batch: usize) -> FrozenState {
        let zeros = vec![Tensor::zeros(&[batch, self.config.decoder_hidden]); self.config.decoder_layers];
        FrozenState {
            hidden: zeros.clone(),
            cell: zeros,
        }
    }

    /// One decoding step outside of training: for each `(memory row, state
    /// row, previous token)` returns log-probabilities `[k, V]` and the next
    /// states, in the same order.
    pub fn step_log_probs(
        &self,
        mem: &FrozenMemory,
        mem_rows: &[usize],
        state: &FrozenState,
        state_rows: &[usize],
        prev: &[TokenId],
    ) -> Result<(Tensor, FrozenState)> {
        let mut g = Graph::new();
        let m = mem.rows(&mut g, mem_rows);
        let s = state.rows(&mut g, state_rows);
        let out = self.decode_step(&mut g, &m, prev, &s)?;
        let lp = g.log_softmax(out.logits)?;
        Ok((g.value(lp).clone(), out.state.freeze(&g)))
    }

    /// Parameters reached when running task `task`.
    pub fn task_path_params(&self, task: usize) -> Vec<ParamId> {
        let t = &self.tasks[task];
        let mut out: Vec<ParamId> = t.embed.into_iter().collect();
        out.extend([t.adapter_w, t.adapter_b]);
        for l in t.layers.iter().chain(&self.shared) {
            for d in [&l.fwd, &l.bwd] {
                out.extend([d.wx, d.wh, d.b]);
            }
        }
        out.extend(t.task_embedding);
        out
    }
}
