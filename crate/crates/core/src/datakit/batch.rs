use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{stack_downsample, FrameSequence, STACK, STRIDE};
use super::mlm::{corrupt_mlm, CorruptionConfig, MASK_WORD};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Text,
}

/// One transduction task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub modality: Modality,
    /// Key of the input vocabulary; `None` for speech.
    pub input_vocab: Option<String>,
    pub corruption: Option<CorruptionConfig>,
    pub loss_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleInput {
    /// Unstacked base-rate frames.
    Frames(FrameSequence),
    /// Raw text; corrupted (if configured) and encoded at batch time.
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: usize,
    pub input: SampleInput,
    /// Output tokens ending in EOS.
    pub target: Vec<TokenId>,
}

impl Sample {
    pub fn new(task: usize, input: SampleInput, target: Vec<TokenId>) -> Result<Self> {
        if target.last() != Some(&EOS) || target[..target.len() - 1].iter().any(|&t| t == EOS || t == PAD || t == BOS) {
            return Err(Error::Config("target must end in EOS and contain no other specials".into()));
        }
        Ok(Sample { task, input, target })
    }
}

/// Encoder-ready input of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum PreparedInput {
    /// Stacked and downsampled frames.
    Frames(FrameSequence),
    Tokens(Vec<TokenId>),
}

impl PreparedInput {
    pub fn len(&self) -> usize {
        match self {
            PreparedInput::Frames(f) => f.num_frames(),
            PreparedInput::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    /// `[B, T, dim]` row-major, zero beyond each length.
    Frames { data: Vec<f64>, dim: usize },
    /// `[B, T]`, PAD beyond each length.
    Tokens { ids: Vec<TokenId> },
}

/// Padded samples of a single task.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: usize,
    pub input: BatchInput,
    pub input_lengths: Vec<usize>,
    pub max_input: usize,
    /// `[B, U]`, PAD beyond each length.
    pub targets: Vec<TokenId>,
    pub target_lengths: Vec<usize>,
    pub max_target: usize,
}

impl Batch {
    pub fn collate(task: usize, items: &[(PreparedInput, Vec<TokenId>)]) -> Result<Batch> {
        if items.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let max_input = items.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
        let max_target = items.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let b = items.len();
        let mut targets = vec![PAD; b * max_target];
        for (r, (inp, tgt)) in items.iter().enumerate() {
            if inp.is_empty() {
                return Err(Error::Config(format!("sample {r} has empty input")));
            }
            if tgt.last() != Some(&EOS) {
                return Err(Error::Config(format!("sample {r} target does not end in EOS")));
            }
            targets[r * max_target..r * max_target + tgt.len()].copy_from_slice(tgt);
        }
        let input = match &items[0].0 {
            PreparedInput::Frames(f0) => {
                let dim = f0.dim();
                let mut data = vec![0.0; b * max_input * dim];
                for (r, (inp, _)) in items.iter().enumerate() {
                    let PreparedInput::Frames(f) = inp else {
                        return Err(Error::Config("mixed input modalities in batch".into()));
                    };
                    if f.dim() != dim {
                        return Err(Error::shape("collate", &[dim], &[f.dim()]));
                    }
                    data[r * max_input * dim..r * max_input * dim + f.data().len()].copy_from_slice(f.data());
                }
                BatchInput::Frames { data, dim }
            }
            PreparedInput::Tokens(_) => {
                let mut ids = vec![PAD; b * max_input];
                for (r, (inp, _)) in items.iter().enumerate() {
                    let PreparedInput::Tokens(t) = inp else {
                        return Err(Error::Config("mixed input modalities in batch".into()));
                    };
                    if t.iter().any(|&x| x == PAD || x == BOS || x == EOS) {
                        return Err(Error::Config(format!("sample {r} input contains PAD/BOS/EOS")));
                    }
                    ids[r * max_input..r * max_input + t.len()].copy_from_slice(t);
                }
                BatchInput::Tokens { ids }
            }
        };
        Ok(Batch {
            task,
            input,
            input_lengths: items.iter().map(|(i, _)| i.len()).collect(),
            max_input,
            targets,
            target_lengths: items.iter().map(|(_, t)| t.len()).collect(),
            max_target,
        })
    }

    pub fn len(&self) -> usize {
        self.input_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_lengths.is_empty()
    }

    pub fn num_target_tokens(&self) -> usize {
        self.target_lengths.iter().sum()
    }

    pub fn target(&self, r: usize) -> &[TokenId] {
        &self.targets[r * self.max_target..r * self.max_target + self.target_lengths[r]]
    }

    /// Unpadded input of sample `r`.
    pub fn prepared_input(&self, r: usize) -> PreparedInput {
        let n = self.input_lengths[r];
        match &self.input {
            BatchInput::Frames { data, dim } => {
                let start = r * self.max_input * dim;
                PreparedInput::Frames(
                    FrameSequence::new(*dim, data[start..start + n * dim].to_vec(), 0.0).expect("valid frames"),
                )
            }
            BatchInput::Tokens { ids } => PreparedInput::Tokens(ids[r * self.max_input..r * self.max_input + n].to_vec()),
        }
    }

    /// Sub-batch of the given rows, re-padded to their own maxima.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let items: Vec<_> = rows
            .iter()
            .map(|&r| (self.prepared_input(r), self.target(r).to_vec()))
            .collect();
        Batch::collate(self.task, &items)
    }

    /// Same samples with `extra_input` more padded input positions and
    /// `extra_target` more padded target positions.
    pub fn with_extra_padding(&self, extra_input: usize, extra_target: usize) -> Batch {
        let b = self.len();
        let (t0, t1) = (self.max_input, self.max_input + extra_input);
        let input = match &self.input {
            BatchInput::Frames { data, dim } => {
                let mut out = vec![0.0; b * t1 * dim];
                for r in 0..b {
                    out[r * t1 * dim..r * t1 * dim + t0 * dim].copy_from_slice(&data[r * t0 * dim..(r + 1) * t0 * dim]);
                }
                BatchInput::Frames { data: out, dim: *dim }
            }
            BatchInput::Tokens { ids } => {
                let mut out = vec![PAD; b * t1];
                for r in 0..b {
                    out[r * t1..r * t1 + t0].copy_from_slice(&ids[r * t0..(r + 1) * t0]);
                }
                BatchInput::Tokens { ids: out }
            }
        };
        let (u0, u1) = (self.max_target, self.max_target + extra_target);
        let mut targets = vec![PAD; b * u1];
        for r in 0..b {
            targets[r * u1..r * u1 + u0].copy_from_slice(&self.targets[r * u0..(r + 1) * u0]);
        }
        Batch {
            task: self.task,
            input,
            input_lengths: self.input_lengths.clone(),
            max_input: t1,
            targets,
            target_lengths: self.target_lengths.clone(),
            max_target: u1,
        }
    }
}

/// Tasks, their training data, and the vocabularies their inputs use.
#[derive(Clone, Debug)]
pub struct TaskRegistry {
    tasks: Vec<TaskSpec>,
    datasets: Vec<Vec<Sample>>,
    vocabs: BTreeMap<String, Arc<Vocabulary>>,
}

impl TaskRegistry {
    pub fn new(
        tasks: Vec<TaskSpec>,
        datasets: Vec<Vec<Sample>>,
        vocabs: BTreeMap<String, Arc<Vocabulary>>,
    ) -> Result<Self> {
        if tasks.is_empty() || tasks.len() != datasets.len() {
            return Err(Error::Config("need one dataset per task and at least one task".into()));
        }
        for (i, (t, data)) in tasks.iter().zip(&datasets).enumerate() {
            if t.id != i {
                return Err(Error::Config(format!("task {:?} has id {} at position {i}", t.name, t.id)));
            }
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task name {:?}", t.name)));
            }
            if !(t.loss_weight >= 0.0 && t.loss_weight.is_finite()) {
                return Err(Error::Config(format!("task {:?} loss weight must be >= 0", t.name)));
            }
            match (t.modality, &t.input_vocab) {
                (Modality::Speech, None) => {}
                (Modality::Text, Some(v)) if vocabs.contains_key(v) => {}
                (Modality::Speech, Some(_)) => {
                    return Err(Error::Config(format!("speech task {:?} cannot have an input vocabulary", t.name)))
                }
                (Modality::Text, _) => {
                    return Err(Error::Config(format!("text task {:?} needs a known input vocabulary", t.name)))
                }
            }
            if let Some(c) = &t.corruption {
                c.validate()?;
            }
            if data.is_empty() {
                return Err(Error::Config(format!("task {:?} has an empty dataset", t.name)));
            }
            for s in data {
                let ok = s.task == i
                    && matches!(
                        (&s.input, t.modality),
                        (SampleInput::Frames(_), Modality::Speech) | (SampleInput::Text(_), Modality::Text)
                    );
                if !ok {
                    return Err(Error::Config(format!("sample does not belong to task {:?}", t.name)));
                }
            }
        }
        Ok(TaskRegistry { tasks, datasets, vocabs })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, id: usize) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn task_by_name(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn dataset(&self, id: usize) -> &[Sample] {
        &self.datasets[id]
    }

    pub fn vocab(&self, key: &str) -> Option<&Arc<Vocabulary>> {
        self.vocabs.get(key)
    }

    pub fn vocabs(&self) -> &BTreeMap<String, Arc<Vocabulary>> {
        &self.vocabs
    }

    /// Registry with the same tasks and vocabularies over other data.
    pub fn with_datasets(&self, datasets: Vec<Vec<Sample>>) -> Result<Self> {
        TaskRegistry::new(self.tasks.clone(), datasets, self.vocabs.clone())
    }

    /// Stacks speech frames, or corrupts (if configured) and encodes text.
    pub fn prepare<R: Rng>(&self, sample: &Sample, corruption_rng: &mut R) -> Result<PreparedInput> {
        let task = self.task(sample.task)?;
        match &sample.input {
            SampleInput::Frames(f) => Ok(PreparedInput::Frames(stack_downsample(f, STACK, STRIDE))),
            SampleInput::Text(text) => {
                let key = task.input_vocab.as_deref().unwrap_or_default();
                let vocab = self
                    .vocabs
                    .get(key)
                    .ok_or_else(|| Error::Config(format!("missing vocabulary {key:?}")))?;
                let words: Vec<&str> = text.split_whitespace().collect();
                let ids = match &task.corruption {
                    Some(cfg) => {
                        let (corrupted, _) = corrupt_mlm(&words, cfg, corruption_rng);
                        let refs: Vec<&str> = corrupted.iter().map(String::as_str).collect();
                        vocab.encode_words(&refs, Some(MASK_WORD))
                    }
                    None => vocab.encode_words(&words, None),
                };
                Ok(PreparedInput::Tokens(ids))
            }
        }
    }

    pub fn collate<R: Rng>(&self, task: usize, samples: &[&Sample], corruption_rng: &mut R) -> Result<Batch> {
        let items = samples
            .iter()
            .map(|s| Ok((self.prepare(s, corruption_rng)?, s.target.clone())))
            .collect::<Result<Vec<_>>>()?;
        Batch::collate(task, &items)
    }

    /// Consecutive batches over one task's data in stored order, with
    /// corruption drawn from a stream seeded by `seed`.
    pub fn ordered_batches(&self, task: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = &self.datasets[task];
        data.chunks(batch_size.max(1))
            .map(|chunk| {
                let refs: Vec<&Sample> = chunk.iter().collect();
                self.collate(task, &refs, &mut rng)
            })
            .collect()
    }
}

/// Uniform task choice, then epoch-shuffled sampling without replacement
/// inside the chosen task.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    corruption_rngs: Vec<ChaCha8Rng>,
}

impl BatchSampler {
    pub fn new(registry: &TaskRegistry) -> Self {
        let q = registry.tasks().len();
        BatchSampler {
            orders: (0..q).map(|t| (0..registry.dataset(t).len()).collect()).collect(),
            // forces a shuffle before first use
            cursors: (0..q).map(|t| registry.dataset(t).len() + 1).collect(),
            corruption_rngs: registry
                .tasks()
                .iter()
                .map(|t| ChaCha8Rng::seed_from_u64(t.corruption.map_or(0, |c| c.seed)))
                .collect(),
        }
    }

    pub fn sample_batch<R: Rng>(&mut self, registry: &TaskRegistry, batch_size: usize, rng: &mut R) -> Result<Batch> {
        let task = rng.gen_range(0..registry.tasks().len());
        self.sample_task_batch(registry, task, batch_size, rng)
    }

    pub fn sample_task_batch<R: Rng>(
        &mut self,
        registry: &TaskRegistry,
        task: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Batch> {
        let data = registry.dataset(task);
        if batch_size == 0 || data.len() < batch_size {
            return Err(Error::Config(format!(
                "task {task} has {} samples, fewer than batch size {batch_size}",
                data.len()
            )));
        }
        if self.cursors[task] + batch_size > data.len() {
            self.orders[task].shuffle(rng);
            self.cursors[task] = 0;
        }
        let start = self.cursors[task];
        self.cursors[task] += batch_size;
        let picked: Vec<&Sample> = self.orders[task][start..start + batch_size]
            .iter()
            .map(|&i| &data[i])
            .collect();
        registry.collate(task, &picked, &mut self.corruption_rngs[task])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_subword, Scheme, MASK};

    pub(crate) fn toy_registry(q: usize, per_task: usize, mask_rate: f64) -> TaskRegistry {
        let lines: Vec<String> = (0..per_task).map(|i| format!("w{} x{}", i % 5, i % 3)).collect();
        let vocab = Arc::new(train_subword(&lines, 0, Scheme::Char).unwrap());
        let mut tasks = Vec::new();
        let mut data = Vec::new();
        for q in 0..q {
            tasks.push(TaskSpec {
                id: q,
                name: format!("t{q}"),
                modality: Modality::Text,
                input_vocab: Some("en".into()),
                corruption: Some(CorruptionConfig::new(mask_rate, q as u64).unwrap()),
                loss_weight: 1.0,
            });
            data.push(
                lines
                    .iter()
                    .map(|l| {
                        let mut t = vocab.encode(l);
                        t.push(EOS);
                        Sample::new(q, SampleInput::Text(l.clone()), t).unwrap()
                    })
                    .collect(),
            );
        }
        TaskRegistry::new(tasks, data, BTreeMap::from([("en".to_string(), vocab)])).unwrap()
    }

    #[test]
    fn single_task_is_always_chosen() {
        let reg = toy_registry(1, 10, 0.0);
        let mut s = BatchSampler::new(&reg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(s.sample_batch(&reg, 4, &mut rng).unwrap().task, 0);
        }
    }

    #[test]
    fn task_frequencies_are_uniform() {
        let reg = toy_registry(3, 8, 0.2);
        let mut s = BatchSampler::new(&reg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let draws = 30_000;
        for _ in 0..draws {
            counts[s.sample_batch(&reg, 2, &mut rng).unwrap().task] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn epoch_sampling_is_without_replacement() {
        let reg = toy_registry(1, 12, 0.0);
        let mut s = BatchSampler::new(&reg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // sample order indices directly: 3 batches of 4 cover the epoch
        let mut seen = Vec::new();
        for _ in 0..3 {
            s.sample_task_batch(&reg, 0, 4, &mut rng).unwrap();
            let start = s.cursors[0] - 4;
            seen.extend_from_slice(&s.orders[0][start..start + 4]);
        }
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_homogeneous_and_padded() {
        let reg = toy_registry(2, 10, 1.0);
        let mut s = BatchSampler::new(&reg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let b = s.sample_batch(&reg, 3, &mut rng).unwrap();
            let BatchInput::Tokens { ids } = &b.input else { panic!() };
            for r in 0..b.len() {
                let row = &ids[r * b.max_input..(r + 1) * b.max_input];
                let n = b.input_lengths[r];
                // rate 1: every word is a single MASK
                assert!(row[..n].iter().all(|&t| t == MASK));
                assert!(row[n..].iter().all(|&t| t == PAD));
                assert_eq!(*b.target(r).last().unwrap(), EOS);
            }
        }
    }

    #[test]
    fn registry_rejects_bad_tasks() {
        let reg = toy_registry(1, 4, 0.0);
        let vocabs = reg.vocabs().clone();
        let mut task = reg.tasks()[0].clone();
        assert!(TaskRegistry::new(vec![task.clone()], vec![vec![]], vocabs.clone()).is_err());
        task.modality = Modality::Speech;
        assert!(TaskRegistry::new(vec![task.clone()], vec![reg.dataset(0).to_vec()], vocabs.clone()).is_err());
        let mut task = reg.tasks()[0].clone();
        task.loss_weight = -1.0;
        assert!(TaskRegistry::new(vec![task], vec![reg.dataset(0).to_vec()], vocabs).is_err());

        let mut s = BatchSampler::new(&reg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.sample_batch(&reg, 5, &mut rng).is_err());
    }

    #[test]
    fn extra_padding_and_selection_preserve_samples() {
        let reg = toy_registry(1, 6, 0.0);
        let b = reg.ordered_batches(0, 6, 0).unwrap().remove(0);
        let padded = b.with_extra_padding(3, 2);
        assert_eq!(padded.max_input, b.max_input + 3);
        for r in 0..b.len() {
            assert_eq!(padded.prepared_input(r), b.prepared_input(r));
            assert_eq!(padded.target(r), b.target(r));
        }
        let one = b.select(&[4]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.target(0), b.target(4));
    }
}
