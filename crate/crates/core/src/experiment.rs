//! Synthetic speech and text experiments: corpora, vocabularies, task
//! registries and matching model configurations.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{
    load_samples, synth_parallel_corpus, synth_text_corpus, CorruptionConfig, FrameSequence, Grammar, ManifestEntry,
    Modality, Sample, SampleInput, SpeechRenderer, TaskRegistry, TaskSpec,
};
use crate::error::{Error, Result};
use crate::model::{check_model_gradients, GradCheckReport, Model, ModelConfig, TaskInput};
use crate::tokenizer::{train_subword, Scheme, TokenId, Vocabulary, EOS};

pub const ASR: &str = "asr";
pub const MLM: &str = "mlm";
pub const MT: &str = "mt";
pub const ENGLISH: &str = "en";
pub const FOREIGN: &str = "foreign";

fn default_vocab_size() -> usize {
    60
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub asr_train: usize,
    pub asr_dev: usize,
    pub mlm_train: usize,
    pub mlm_dev: usize,
    pub mt_train: usize,
    pub mt_dev: usize,
    /// Standard deviation of the frame noise.
    pub noise: f64,
    /// Subword vocabulary size (ignored by the character scheme).
    pub vocab_size: usize,
    pub scheme: Scheme,
    pub renderer: SpeechRenderer,
    pub grammar: Grammar,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            asr_train: 2000,
            asr_dev: 200,
            mlm_train: 20000,
            mlm_dev: 0,
            mt_train: 0,
            mt_dev: 0,
            noise: 1.0,
            vocab_size: default_vocab_size(),
            scheme: Scheme::Bpe,
            renderer: SpeechRenderer::default(),
            grammar: Grammar::default(),
        }
    }
}

/// Generated data for every task plus the vocabularies.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub asr_train: Vec<(String, FrameSequence)>,
    pub asr_dev: Vec<(String, FrameSequence)>,
    pub mlm_train: Vec<String>,
    pub mlm_dev: Vec<String>,
    /// `(foreign, english)` pairs.
    pub mt_train: Vec<(String, String)>,
    pub mt_dev: Vec<(String, String)>,
    pub vocab: Arc<Vocabulary>,
    pub foreign_vocab: Option<Arc<Vocabulary>>,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

fn render_all(cfg: &SynthConfig, texts: Vec<String>, stream: u64) -> Result<Vec<(String, FrameSequence)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, stream));
    texts
        .into_iter()
        .map(|t| {
            let f = cfg.renderer.render(&t, cfg.noise, &mut rng)?;
            Ok((t, f))
        })
        .collect()
}

/// Generates every corpus and trains the vocabularies on training text only.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.asr_train == 0 {
        return Err(Error::Config("need at least one speech training utterance".into()));
    }
    let g = &cfg.grammar;
    let asr_train = render_all(cfg, synth_text_corpus(sub_seed(cfg.seed, 1), cfg.asr_train, g)?, 11)?;
    let asr_dev = render_all(cfg, synth_text_corpus(sub_seed(cfg.seed, 2), cfg.asr_dev, g)?, 12)?;
    let mlm_train = synth_text_corpus(sub_seed(cfg.seed, 3), cfg.mlm_train, g)?;
    let mlm_dev = synth_text_corpus(sub_seed(cfg.seed, 4), cfg.mlm_dev, g)?;
    let mt_train = synth_parallel_corpus(sub_seed(cfg.seed, 5), cfg.mt_train, g)?;
    let mt_dev = synth_parallel_corpus(sub_seed(cfg.seed, 6), cfg.mt_dev, g)?;

    let mut english: Vec<&str> = asr_train.iter().map(|(t, _)| t.as_str()).collect();
    english.extend(mlm_train.iter().map(String::as_str));
    english.extend(mt_train.iter().map(|(_, e)| e.as_str()));
    let vocab = Arc::new(train_subword(&english, cfg.vocab_size, cfg.scheme)?);
    let foreign_vocab = if mt_train.is_empty() {
        None
    } else {
        let foreign: Vec<&str> = mt_train.iter().map(|(f, _)| f.as_str()).collect();
        Some(Arc::new(train_subword(&foreign, cfg.vocab_size, cfg.scheme)?))
    };
    Ok(SynthCorpus {
        asr_train,
        asr_dev,
        mlm_train,
        mlm_dev,
        mt_train,
        mt_dev,
        vocab,
        foreign_vocab,
    })
}

/// Which tasks join the speech task, and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskMix {
    pub mlm: bool,
    pub mask_rate: f64,
    pub mt: bool,
    /// Loss weight per task name; unlisted tasks weigh 1.
    pub loss_weights: BTreeMap<String, f64>,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix::with_mlm(0.4)
    }
}

impl TaskMix {
    pub fn asr_only() -> Self {
        TaskMix {
            mlm: false,
            mask_rate: 0.0,
            mt: false,
            loss_weights: BTreeMap::new(),
        }
    }

    pub fn with_mlm(mask_rate: f64) -> Self {
        TaskMix {
            mlm: true,
            mask_rate,
            ..Self::asr_only()
        }
    }

    pub fn task_names(&self) -> Vec<&'static str> {
        let mut v = vec![ASR];
        if self.mlm {
            v.push(MLM);
        }
        if self.mt {
            v.push(MT);
        }
        v
    }
}

fn target(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    let mut t = vocab.encode(text);
    t.push(EOS);
    t
}

struct Split<'a> {
    asr: &'a [(String, FrameSequence)],
    mlm: &'a [String],
    mt: &'a [(String, String)],
}

/// Registry entry of a named task under `mix`.
pub fn task_spec(name: &str, id: usize, mix: &TaskMix, seed: u64) -> Result<TaskSpec> {
    let loss_weight = mix.loss_weights.get(name).copied().unwrap_or(1.0);
    let (modality, input_vocab, corruption) = match name {
        ASR => (Modality::Speech, None, None),
        MLM => (
            Modality::Text,
            Some(ENGLISH.to_string()),
            Some(CorruptionConfig::new(mix.mask_rate, sub_seed(seed, 21))?),
        ),
        MT => (Modality::Text, Some(FOREIGN.to_string()), None),
        other => return Err(Error::UnknownTask(other.to_string())),
    };
    Ok(TaskSpec {
        id,
        name: name.to_string(),
        modality,
        input_vocab,
        corruption,
        loss_weight,
    })
}

fn vocab_map(english: Arc<Vocabulary>, foreign: Option<Arc<Vocabulary>>) -> BTreeMap<String, Arc<Vocabulary>> {
    let mut vocabs = BTreeMap::from([(ENGLISH.to_string(), english)]);
    if let Some(f) = foreign {
        vocabs.insert(FOREIGN.to_string(), f);
    }
    vocabs
}

fn build(corpus: &SynthCorpus, mix: &TaskMix, split: Split, seed: u64, names: &[&str]) -> Result<TaskRegistry> {
    let v = &corpus.vocab;
    let mut tasks = Vec::new();
    let mut data = Vec::new();
    for &name in names {
        let spec = task_spec(name, tasks.len(), mix, seed)?;
        let id = spec.id;
        let samples = match name {
            ASR => split
                .asr
                .iter()
                .map(|(t, f)| Sample::new(id, SampleInput::Frames(f.clone()), target(v, t)))
                .collect::<Result<Vec<_>>>()?,
            MLM => split
                .mlm
                .iter()
                .map(|t| Sample::new(id, SampleInput::Text(t.clone()), target(v, t)))
                .collect::<Result<Vec<_>>>()?,
            _ => split
                .mt
                .iter()
                .map(|(f, e)| Sample::new(id, SampleInput::Text(f.clone()), target(v, e)))
                .collect::<Result<Vec<_>>>()?,
        };
        tasks.push(spec);
        data.push(samples);
    }
    TaskRegistry::new(tasks, data, vocab_map(corpus.vocab.clone(), corpus.foreign_vocab.clone()))
}

/// Registry over the named tasks from manifest entries; speech features are
/// read relative to `base_dir`.
pub fn registry_from_manifest(
    entries: &[ManifestEntry],
    mix: &TaskMix,
    names: &[&str],
    vocab: Arc<Vocabulary>,
    foreign_vocab: Option<Arc<Vocabulary>>,
    base_dir: &Path,
    seed: u64,
) -> Result<TaskRegistry> {
    let tasks = names
        .iter()
        .enumerate()
        .map(|(id, n)| task_spec(n, id, mix, seed))
        .collect::<Result<Vec<_>>>()?;
    let data = load_samples(entries, &tasks, &vocab, base_dir)?;
    TaskRegistry::new(tasks, data, vocab_map(vocab, foreign_vocab))
}

/// Manifest entries of one split of the corpus; speech inputs point to
/// `{prefix}{index}.feat` files under `feats/`.
pub fn manifest_entries(corpus: &SynthCorpus, dev: bool) -> (Vec<ManifestEntry>, Vec<(String, &FrameSequence)>) {
    let (split, asr, mlm, mt) = if dev {
        ("dev", &corpus.asr_dev, &corpus.mlm_dev, &corpus.mt_dev)
    } else {
        ("train", &corpus.asr_train, &corpus.mlm_train, &corpus.mt_train)
    };
    let mut entries = Vec::new();
    let mut feats = Vec::new();
    for (i, (text, frames)) in asr.iter().enumerate() {
        let path = format!("feats/{split}_{i:05}.feat");
        entries.push(ManifestEntry {
            task: ASR.into(),
            input: path.clone(),
            target: text.clone(),
        });
        feats.push((path, frames));
    }
    for t in mlm {
        entries.push(ManifestEntry {
            task: MLM.into(),
            input: t.clone(),
            target: t.clone(),
        });
    }
    for (f, e) in mt {
        entries.push(ManifestEntry {
            task: MT.into(),
            input: f.clone(),
            target: e.clone(),
        });
    }
    (entries, feats)
}

/// Training registry with the tasks of `mix`, speech first.
pub fn train_registry(corpus: &SynthCorpus, mix: &TaskMix, seed: u64) -> Result<TaskRegistry> {
    let split = Split {
        asr: &corpus.asr_train,
        mlm: &corpus.mlm_train,
        mt: &corpus.mt_train,
    };
    build(corpus, mix, split, seed, &mix.task_names())
}

/// Dev registry over the named tasks (which must have dev data).
pub fn dev_registry(corpus: &SynthCorpus, mix: &TaskMix, tasks: &[&str]) -> Result<TaskRegistry> {
    let split = Split {
        asr: &corpus.asr_dev,
        mlm: &corpus.mlm_dev,
        mt: &corpus.mt_dev,
    };
    build(corpus, mix, split, 0, tasks)
}

/// Network sizes not fixed by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSize {
    pub hidden: usize,
    pub attention_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_embed: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        ModelSize {
            hidden: 48,
            attention_dim: 48,
            decoder_hidden: 96,
            decoder_embed: 48,
        }
    }
}

/// Model configuration whose tasks line up with [`train_registry`].
pub fn model_config(
    corpus: &SynthCorpus,
    mix: &TaskMix,
    size: &ModelSize,
    shared_layers: usize,
    use_task_embedding: bool,
    seed: u64,
) -> Result<ModelConfig> {
    let foreign = corpus.foreign_vocab.as_ref().map(|f| f.len());
    model_config_for(corpus.vocab.len(), foreign, mix, size, shared_layers, use_task_embedding, seed)
}

/// Model configuration from vocabulary sizes alone.
pub fn model_config_for(
    vocab_size: usize,
    foreign_vocab_size: Option<usize>,
    mix: &TaskMix,
    size: &ModelSize,
    shared_layers: usize,
    use_task_embedding: bool,
    seed: u64,
) -> Result<ModelConfig> {
    let tasks = mix
        .task_names()
        .into_iter()
        .map(|n| match n {
            ASR => Ok(TaskInput::speech(ASR)),
            MLM => Ok(TaskInput::text(MLM, vocab_size)),
            _ => foreign_vocab_size
                .map(|f| TaskInput::text(MT, f))
                .ok_or_else(|| Error::Config("translation task needs parallel data".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c = ModelConfig::desk(tasks, vocab_size);
    c.shared_layers = shared_layers;
    c.hidden = size.hidden;
    c.attention_dim = size.attention_dim;
    c.decoder_hidden = size.decoder_hidden;
    c.decoder_embed = size.decoder_embed;
    c.use_task_embedding = use_task_embedding;
    c.seed = seed;
    c.validate()?;
    Ok(c)
}

/// Settings of the small two-task gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGradCheck {
    pub seed: u64,
    pub hidden: usize,
    pub vocab_size: usize,
    /// Samples per task.
    pub samples: usize,
    /// Coordinates checked per parameter tensor.
    pub per_param: usize,
    /// Finite-difference step; the summed loss is large enough that smaller
    /// steps are dominated by round-off.
    pub eps: f64,
    pub shared_layers: usize,
}

impl Default for ToyGradCheck {
    fn default() -> Self {
        ToyGradCheck {
            seed: 0,
            hidden: 16,
            vocab_size: 60,
            samples: 3,
            per_param: 4,
            eps: 1e-3,
            shared_layers: 1,
        }
    }
}

/// Speech plus masked-text model on a few synthetic samples, checked against
/// central differences.
pub fn toy_gradcheck(t: &ToyGradCheck) -> Result<GradCheckReport> {
    let corpus = synthesize(&SynthConfig {
        seed: t.seed,
        asr_train: t.samples,
        asr_dev: 0,
        // enough text for the subword vocabulary to reach its target size
        mlm_train: 500,
        ..SynthConfig::default()
    })?;
    if corpus.vocab.len() != t.vocab_size {
        return Err(Error::Config(format!(
            "toy vocabulary has {} entries, wanted {}",
            corpus.vocab.len(),
            t.vocab_size
        )));
    }
    let mix = TaskMix::with_mlm(0.4);
    let reg = train_registry(&corpus, &mix, t.seed)?;
    let size = ModelSize {
        hidden: t.hidden,
        attention_dim: t.hidden,
        decoder_hidden: 2 * t.hidden,
        decoder_embed: t.hidden,
    };
    let model = Model::new(model_config(&corpus, &mix, &size, t.shared_layers, true, t.seed)?)?;
    let mut batches = Vec::new();
    for q in 0..reg.tasks().len() {
        let samples: Vec<&Sample> = reg.dataset(q).iter().take(t.samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        batches.push(reg.collate(q, &samples, &mut rng)?);
    }
    check_model_gradients(&model, &batches, t.per_param, t.eps, t.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            asr_train: 20,
            asr_dev: 5,
            mlm_train: 50,
            mlm_dev: 5,
            mt_train: 30,
            mt_dev: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn registries_line_up_with_model_config() {
        let corpus = synthesize(&small()).unwrap();
        let mut mix = TaskMix::with_mlm(0.4);
        mix.mt = true;
        let reg = train_registry(&corpus, &mix, 0).unwrap();
        let cfg = model_config(&corpus, &mix, &ModelSize::default(), 1, true, 0).unwrap();
        assert_eq!(reg.tasks().len(), 3);
        for (q, t) in reg.tasks().iter().enumerate() {
            assert_eq!(cfg.task_index(&t.name).unwrap(), q);
            assert_eq!(t.modality, cfg.tasks[q].modality);
        }
        assert_eq!(cfg.tasks[1].vocab_size, Some(corpus.vocab.len()));
        let dev = dev_registry(&corpus, &mix, &[ASR]).unwrap();
        assert_eq!(dev.dataset(0).len(), 5);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&small()).unwrap();
        assert_eq!(a.asr_train, b.asr_train);
        assert_eq!(a.mlm_train, b.mlm_train);
        assert_eq!(a.vocab.to_file_string(), b.vocab.to_file_string());
    }

    #[test]
    fn manifests_reload_to_the_same_registry() {
        use crate::datakit::{write_features, SampleInput};
        let corpus = synthesize(&small()).unwrap();
        let mut mix = TaskMix::with_mlm(0.4);
        mix.mt = true;
        let dir = tempfile::tempdir().unwrap();
        let (entries, feats) = manifest_entries(&corpus, false);
        std::fs::create_dir(dir.path().join("feats")).unwrap();
        for (path, f) in feats {
            write_features(std::fs::File::create(dir.path().join(path)).unwrap(), f).unwrap();
        }
        let names = mix.task_names();
        let loaded = registry_from_manifest(
            &entries,
            &mix,
            &names,
            corpus.vocab.clone(),
            corpus.foreign_vocab.clone(),
            dir.path(),
            0,
        )
        .unwrap();
        let direct = train_registry(&corpus, &mix, 0).unwrap();
        assert_eq!(loaded.tasks(), direct.tasks());
        for q in 0..names.len() {
            let (a, b) = (loaded.dataset(q), direct.dataset(q));
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.target, y.target);
                match (&x.input, &y.input) {
                    (SampleInput::Frames(f), SampleInput::Frames(g)) => {
                        assert_eq!(f.num_frames(), g.num_frames());
                        for (u, v) in f.data().iter().zip(g.data()) {
                            assert_eq!(*u, *v as f32 as f64);
                        }
                    }
                    (u, v) => assert_eq!(u, v),
                }
            }
        }
    }

    #[test]
    fn toy_gradient_check_passes() {
        let r = toy_gradcheck(&ToyGradCheck::default()).unwrap();
        assert!(r.coordinates > 100);
        assert!(r.max_relative_error < 1e-3, "{r:?}");
    }

}
