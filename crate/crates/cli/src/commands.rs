//! The subcommands as library functions; `main` only parses flags and
//! prints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use usted_core::datakit::{read_manifest_file, write_features, write_manifest, ManifestEntry, TaskRegistry};
use usted_core::eval::{beam_decode, bleu, greedy_decode_batch, perplexity, DecodeConfig, ErrorCounter};
use usted_core::experiment::{
    dev_registry, manifest_entries, model_config_for, registry_from_manifest, synthesize, toy_gradcheck,
    train_registry, TaskMix, ToyGradCheck, ASR, MLM, MT,
};
use usted_core::model::{GradCheckReport, Model};
use usted_core::tokenizer::{train_subword, Scheme, TokenId, Vocabulary, EOS};
use usted_core::training::{pretrain_asr, train_multitask, transfer, write_metrics_csv, Checkpoint, TrainOutcome};

use crate::config::{usage, weights_of, ExperimentConfig};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const FOREIGN_VOCAB_FILE: &str = "foreign.vocab";
pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const DEV_MANIFEST: &str = "dev.tsv";
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DEV_FILE: &str = "dev.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn save_vocab(v: &Vocabulary, path: &Path) -> anyhow::Result<()> {
    let mut w = create(path)?;
    v.save(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Vocabulary::load(BufReader::new(f))?)
}

fn optional_vocab(path: &Path) -> anyhow::Result<Option<Arc<Vocabulary>>> {
    Ok(if path.exists() { Some(Arc::new(load_vocab(path)?)) } else { None })
}

fn output_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output_dir.clone().ok_or_else(|| usage("no output directory (--out)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes the synthetic corpus as manifests, feature files and vocabularies.
pub fn cmd_synth(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = output_dir(cfg)?;
    let corpus = synthesize(&cfg.synth)?;
    fs::create_dir_all(dir.join("feats"))?;
    for (dev, file) in [(false, TRAIN_MANIFEST), (true, DEV_MANIFEST)] {
        let (entries, feats) = manifest_entries(&corpus, dev);
        for (path, frames) in feats {
            let mut w = create(&dir.join(path))?;
            write_features(&mut w, frames)?;
            w.flush()?;
        }
        write_manifest(create(&dir.join(file))?, &entries)?;
    }
    save_vocab(&corpus.vocab, &dir.join(VOCAB_FILE))?;
    if let Some(f) = &corpus.foreign_vocab {
        save_vocab(f, &dir.join(FOREIGN_VOCAB_FILE))?;
    }
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    Ok(dir)
}

/// Trains a subword vocabulary on a text file (one sentence per line) or on
/// the targets of a manifest (`.tsv`).
pub fn cmd_tokenize(corpus: &Path, size: usize, scheme: Scheme, out: &Path) -> anyhow::Result<Vocabulary> {
    let lines: Vec<String> = if corpus.extension().is_some_and(|e| e == "tsv") {
        read_manifest_file(corpus)?.into_iter().map(|e| e.target).collect()
    } else {
        let f = File::open(corpus).with_context(|| format!("opening {}", corpus.display()))?;
        BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .collect()
    };
    if lines.is_empty() {
        bail!("{} has no sentences", corpus.display());
    }
    let v = train_subword(&lines, size, scheme)?;
    save_vocab(&v, out)?;
    Ok(v)
}

/// Training and dev registries plus vocabularies for one task mix.
pub struct Data {
    pub train: TaskRegistry,
    pub dev: Option<TaskRegistry>,
    pub vocab: Arc<Vocabulary>,
    pub foreign_vocab: Option<Arc<Vocabulary>>,
}

pub fn load_data(cfg: &ExperimentConfig, mix: &TaskMix, dev_tasks: &[&str]) -> anyhow::Result<Data> {
    let names = mix.task_names();
    match &cfg.corpus_dir {
        Some(dir) => {
            let vocab = Arc::new(load_vocab(&dir.join(VOCAB_FILE))?);
            let foreign_vocab = optional_vocab(&dir.join(FOREIGN_VOCAB_FILE))?;
            let train_entries = read_manifest_file(&dir.join(TRAIN_MANIFEST))?;
            let train = registry_from_manifest(
                &train_entries,
                mix,
                &names,
                vocab.clone(),
                foreign_vocab.clone(),
                dir,
                cfg.seed,
            )?;
            let dev_entries = read_manifest_file(&dir.join(DEV_MANIFEST))?;
            let present: Vec<&str> = dev_tasks
                .iter()
                .copied()
                .filter(|t| dev_entries.iter().any(|e| e.task == *t))
                .collect();
            let dev = if present.is_empty() {
                None
            } else {
                Some(registry_from_manifest(
                    &dev_entries,
                    mix,
                    &present,
                    vocab.clone(),
                    foreign_vocab.clone(),
                    dir,
                    0,
                )?)
            };
            Ok(Data {
                train,
                dev,
                vocab,
                foreign_vocab,
            })
        }
        None => {
            let corpus = synthesize(&cfg.synth)?;
            let present: Vec<&str> = dev_tasks
                .iter()
                .copied()
                .filter(|t| match *t {
                    ASR => !corpus.asr_dev.is_empty(),
                    MLM => !corpus.mlm_dev.is_empty(),
                    _ => !corpus.mt_dev.is_empty(),
                })
                .collect();
            let dev = if present.is_empty() {
                None
            } else {
                Some(dev_registry(&corpus, mix, &present)?)
            };
            Ok(Data {
                train: train_registry(&corpus, mix, cfg.seed)?,
                dev,
                vocab: corpus.vocab.clone(),
                foreign_vocab: corpus.foreign_vocab.clone(),
            })
        }
    }
}

/// First and last mean training loss of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrend {
    pub first: f64,
    pub last: f64,
}

impl LossTrend {
    /// Relative drop from the first to the last window.
    pub fn reduction(&self) -> f64 {
        1.0 - self.last / self.first
    }
}

/// What a training run reports besides its files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Steps drawn from each task.
    pub task_steps: BTreeMap<String, usize>,
    pub best_step: u64,
    /// Dev token error rates of the selected checkpoint, by task.
    pub dev_error_rates: BTreeMap<String, f64>,
    /// Mean loss over the first and last windows of each task's steps.
    pub loss: BTreeMap<String, LossTrend>,
    pub loss_weights: BTreeMap<String, f64>,
}

fn loss_trends(outcome: &TrainOutcome) -> BTreeMap<String, LossTrend> {
    let mut by_task: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in &outcome.metrics {
        by_task.entry(m.task.clone()).or_default().push(m.loss);
    }
    by_task
        .into_iter()
        .map(|(task, l)| {
            let w = (l.len() / 5).clamp(1, 20);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let trend = LossTrend {
                first: mean(&l[..w]),
                last: mean(&l[l.len() - w..]),
            };
            (task, trend)
        })
        .collect()
}

fn write_outcome(
    dir: &Path,
    cfg: &ExperimentConfig,
    data: &Data,
    outcome: &TrainOutcome,
) -> anyhow::Result<RunSummary> {
    outcome.best.save(&dir.join(BEST_CHECKPOINT))?;
    outcome.last.save(&dir.join(LAST_CHECKPOINT))?;
    write_metrics_csv(create(&dir.join(METRICS_FILE))?, &outcome.metrics)?;
    let mut w = create(&dir.join(DEV_FILE))?;
    writeln!(w, "step,task,error_rate")?;
    for e in &outcome.evals {
        for (task, rate) in &e.error_rates {
            writeln!(w, "{},{task},{rate}", e.step)?;
        }
    }
    w.flush()?;
    save_vocab(&data.vocab, &dir.join(VOCAB_FILE))?;
    if let Some(f) = &data.foreign_vocab {
        save_vocab(f, &dir.join(FOREIGN_VOCAB_FILE))?;
    }
    let dev_error_rates = outcome
        .evals
        .iter()
        .find(|e| e.step == outcome.best.step)
        .map(|e| e.error_rates.iter().cloned().collect())
        .unwrap_or_default();
    let mut task_steps = BTreeMap::new();
    for m in &outcome.metrics {
        *task_steps.entry(m.task.clone()).or_insert(0) += 1;
    }
    let summary = RunSummary {
        steps: outcome.metrics.len(),
        task_steps,
        best_step: outcome.best.step,
        dev_error_rates,
        loss: loss_trends(outcome),
        loss_weights: weights_of(cfg),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

fn dev_task_names(cfg: &ExperimentConfig) -> Vec<&str> {
    cfg.dev_tasks.iter().map(String::as_str).collect()
}

/// Trains a standalone speech recognizer.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    let dir = output_dir(cfg)?;
    let mut cfg = cfg.clone();
    cfg.mix = TaskMix::asr_only();
    cfg.dev_tasks.retain(|t| t == ASR);
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    let data = load_data(&cfg, &cfg.mix, &dev_task_names(&cfg))?;
    let m = &cfg.model;
    let model_cfg = model_config_for(
        data.vocab.len(),
        None,
        &cfg.mix,
        &m.size,
        m.shared_layers,
        m.use_task_embedding,
        cfg.seed,
    )?;
    let outcome = pretrain_asr(Model::new(model_cfg)?, &data.train, data.dev.as_ref(), &cfg.train_config())?;
    write_outcome(&dir, &cfg, &data, &outcome)
}

/// Joint multitask training, optionally starting from a pretrained speech
/// recognizer.
pub fn cmd_train(cfg: &ExperimentConfig, init: Option<&Path>) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    let dir = output_dir(cfg)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    let data = load_data(cfg, &cfg.mix, &dev_task_names(cfg))?;
    let m = &cfg.model;
    let model_cfg = model_config_for(
        data.vocab.len(),
        data.foreign_vocab.as_ref().map(|f| f.len()),
        &cfg.mix,
        &m.size,
        m.shared_layers,
        m.use_task_embedding,
        cfg.seed,
    )?;
    let model = match init {
        Some(p) => transfer(&Checkpoint::load(p)?, model_cfg, ASR)?,
        None => Model::new(model_cfg)?,
    };
    let outcome = train_multitask(model, &data.train, data.dev.as_ref(), &cfg.train_config())?;
    write_outcome(&dir, cfg, &data, &outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Wer,
    Bleu,
    Ter,
    Ppl,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Wer => "wer",
            Metric::Bleu => "bleu",
            Metric::Ter => "ter",
            Metric::Ppl => "ppl",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub manifest: PathBuf,
    pub metric: Metric,
    pub checkpoint: Option<PathBuf>,
    /// Precomputed hypotheses, one line per manifest entry of the task.
    pub hyps: Option<PathBuf>,
    pub beam: usize,
    /// Defaults to the first task in the manifest.
    pub task: Option<String>,
    /// Defaults to `vocab.txt` beside the checkpoint, then beside the
    /// manifest.
    pub vocab: Option<PathBuf>,
    pub mask_rate: f64,
    pub write_hyps: Option<PathBuf>,
}

/// One line of a score report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Score {
    pub metric: String,
    pub dataset: String,
    pub value: f64,
}

pub const SCORE_HEADER: &str = "metric,dataset,value";

pub fn write_scores<W: Write>(mut w: W, scores: &[Score]) -> anyhow::Result<()> {
    writeln!(w, "{SCORE_HEADER}")?;
    for s in scores {
        writeln!(w, "{},{},{}", s.metric, s.dataset, s.value)?;
    }
    Ok(())
}

fn find_vocab(req: &EvalRequest, base: &Path, file: &str) -> Option<PathBuf> {
    let beside_ck = req.checkpoint.as_ref().and_then(|c| c.parent()).map(|d| d.join(file));
    beside_ck.into_iter().chain([base.join(file)]).find(|p| p.exists())
}

fn strip_eos(t: &[TokenId]) -> &[TokenId] {
    t.strip_suffix(&[EOS]).unwrap_or(t)
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Scores a model or a hypothesis file against the targets of one task in a
/// manifest.
pub fn cmd_eval(req: &EvalRequest) -> anyhow::Result<Score> {
    if req.beam == 0 {
        return Err(usage("beam must be at least 1"));
    }
    if req.hyps.is_none() && req.checkpoint.is_none() {
        return Err(usage("eval needs --checkpoint or --hyps"));
    }
    if req.metric == Metric::Ppl && req.checkpoint.is_none() {
        return Err(usage("perplexity needs --checkpoint"));
    }
    let base = req.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = read_manifest_file(&req.manifest)?;
    let task = match &req.task {
        Some(t) => t.clone(),
        None => entries.first().map(|e| e.task.clone()).ok_or_else(|| usage("empty manifest"))?,
    };
    let entries: Vec<ManifestEntry> = entries.into_iter().filter(|e| e.task == task).collect();
    if entries.is_empty() {
        return Err(usage(format!("no {task} entries in {}", req.manifest.display())));
    }
    let references: Vec<String> = entries.iter().map(|e| e.target.clone()).collect();
    let vocab_path = req.vocab.clone().or_else(|| find_vocab(req, &base, VOCAB_FILE));
    let dataset = req
        .manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let (hypotheses, value) = match (&req.checkpoint, &req.hyps) {
        (_, Some(h)) => {
            let text = fs::read_to_string(h).with_context(|| format!("reading {}", h.display()))?;
            let hyps: Vec<String> = text.lines().map(str::to_string).collect();
            if hyps.len() != references.len() {
                bail!("{} hypotheses for {} references", hyps.len(), references.len());
            }
            let vocab = match (req.metric, &vocab_path) {
                (Metric::Ter, Some(p)) => Some(load_vocab(p)?),
                (Metric::Ter, None) => return Err(usage("token error rate needs a vocabulary (--vocab)")),
                _ => None,
            };
            let value = text_score(req.metric, &references, &hyps, vocab.as_ref())?;
            (hyps, value)
        }
        (Some(ck), None) => {
            let vocab_path = vocab_path.ok_or_else(|| usage("no vocabulary found (--vocab)"))?;
            let vocab = Arc::new(load_vocab(&vocab_path)?);
            let foreign = optional_vocab(&vocab_path.with_file_name(FOREIGN_VOCAB_FILE))?;
            let model = Checkpoint::load(ck)?.to_model()?;
            let model_task = model.config().task_index(&task)?;
            let mix = TaskMix {
                mlm: task == MLM,
                mask_rate: req.mask_rate,
                mt: task == MT,
                loss_weights: BTreeMap::new(),
            };
            let reg = registry_from_manifest(&entries, &mix, &[task.as_str()], vocab.clone(), foreign, &base, 0)?;
            let mut batches = reg.ordered_batches(0, 16, 0)?;
            for b in &mut batches {
                b.task = model_task;
            }
            if req.metric == Metric::Ppl {
                (Vec::new(), perplexity(&model, &batches)?)
            } else {
                let mut ids: Vec<Vec<TokenId>> = Vec::new();
                let decode = DecodeConfig::beam(req.beam);
                for b in &batches {
                    if req.beam == 1 {
                        ids.extend(greedy_decode_batch(&model, b, None)?);
                    } else {
                        for r in 0..b.len() {
                            let h = beam_decode(&model, model_task, &b.prepared_input(r), &decode)?;
                            ids.push(strip_eos(&h.tokens).to_vec());
                        }
                    }
                }
                let hyps = ids.iter().map(|t| vocab.decode(t)).collect::<usted_core::Result<Vec<_>>>()?;
                let value = if req.metric == Metric::Ter {
                    let mut c = ErrorCounter::default();
                    for (r, h) in reg.dataset(0).iter().zip(&ids) {
                        c.add(strip_eos(&r.target), h)?;
                    }
                    c.rate()?
                } else {
                    text_score(req.metric, &references, &hyps, None)?
                };
                (hyps, value)
            }
        }
        (None, None) => unreachable!("checked above"),
    };
    if let Some(path) = &req.write_hyps {
        let mut w = create(path)?;
        for h in &hypotheses {
            writeln!(w, "{h}")?;
        }
        w.flush()?;
    }
    Ok(Score {
        metric: req.metric.name().into(),
        dataset,
        value,
    })
}

/// Corpus-level score of text hypotheses.
pub fn text_score(
    metric: Metric,
    references: &[String],
    hypotheses: &[String],
    vocab: Option<&Vocabulary>,
) -> anyhow::Result<f64> {
    Ok(match metric {
        Metric::Wer => {
            let mut c = ErrorCounter::default();
            for (r, h) in references.iter().zip(hypotheses) {
                c.add(&words(r), &words(h))?;
            }
            c.rate()?
        }
        Metric::Ter => {
            let v = vocab.ok_or_else(|| usage("token error rate needs a vocabulary"))?;
            let mut c = ErrorCounter::default();
            for (r, h) in references.iter().zip(hypotheses) {
                c.add(&v.encode(r), &v.encode(h))?;
            }
            c.rate()?
        }
        Metric::Bleu => {
            let refs: Vec<Vec<&str>> = references.iter().map(|r| words(r)).collect();
            let hyps: Vec<Vec<&str>> = hypotheses.iter().map(|h| words(h)).collect();
            bleu(&refs, &hyps)?
        }
        Metric::Ppl => return Err(usage("perplexity needs a model")),
    })
}

/// Gradient check report with its wall time.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckOutput {
    #[serde(flatten)]
    pub report: GradCheckReport,
    pub settings: ToyGradCheck,
    pub seconds: f64,
}

pub fn cmd_gradcheck(settings: &ToyGradCheck) -> anyhow::Result<GradCheckOutput> {
    let started = Instant::now();
    let report = toy_gradcheck(settings)?;
    Ok(GradCheckOutput {
        report,
        settings: settings.clone(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Values of each sweep axis; every point changes one axis of the base
/// config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub shared_layers: Vec<usize>,
    pub mask_rates: Vec<f64>,
    /// Loss weights of the text task.
    pub loss_weights: Vec<f64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            shared_layers: vec![0, 1, 2, 3, 4],
            mask_rates: vec![0.0, 0.4, 1.0],
            loss_weights: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub shared_layers: usize,
    pub mask_rate: f64,
    pub loss_weight: f64,
}

impl SweepPoint {
    /// Run directory name, e.g. `K3_R0.4_W1`.
    pub fn name(&self) -> String {
        format!("K{}_R{}_W{}", self.shared_layers, self.mask_rate, self.loss_weight)
    }
}

/// Points of the sweep in axis order, without duplicates.
pub fn sweep_points(base: &ExperimentConfig, axes: &SweepAxes) -> Vec<SweepPoint> {
    let origin = SweepPoint {
        shared_layers: base.model.shared_layers,
        mask_rate: base.mix.mask_rate,
        loss_weight: weights_of(base).get(MLM).copied().unwrap_or(1.0),
    };
    let mut points: Vec<SweepPoint> = Vec::new();
    let mut push = |p: SweepPoint| {
        if !points.contains(&p) {
            points.push(p);
        }
    };
    for &k in &axes.shared_layers {
        push(SweepPoint {
            shared_layers: k,
            ..origin.clone()
        });
    }
    for &r in &axes.mask_rates {
        push(SweepPoint {
            mask_rate: r,
            ..origin.clone()
        });
    }
    for &w in &axes.loss_weights {
        push(SweepPoint {
            loss_weight: w,
            ..origin.clone()
        });
    }
    points
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// Trains every sweep point into its own run directory and writes a summary
/// table of dev error rates.
pub fn cmd_sweep(base: &ExperimentConfig, axes: &SweepAxes) -> anyhow::Result<Vec<(SweepPoint, RunSummary)>> {
    base.validate()?;
    if !base.mix.mlm {
        return Err(usage("a sweep needs the masked text task"));
    }
    let root = output_dir(base)?;
    let points = sweep_points(base, axes);
    let mut cfgs = Vec::new();
    for p in &points {
        let mut c = base.clone();
        c.model.shared_layers = p.shared_layers;
        c.mix.mask_rate = p.mask_rate;
        c.mix.loss_weights.insert(MLM.into(), p.loss_weight);
        c.output_dir = Some(root.join(p.name()));
        c.validate()?;
        cfgs.push(c);
    }
    let mut out = Vec::new();
    for (p, c) in points.into_iter().zip(cfgs) {
        log::info!("sweep point {}", p.name());
        let s = cmd_train(&c, None)?;
        out.push((p, s));
    }
    let mut w = create(&root.join(SWEEP_FILE))?;
    writeln!(w, "name,shared_layers,mask_rate,loss_weight,ter,best_step")?;
    for (p, s) in &out {
        let ter = s.dev_error_rates.get(ASR).copied().unwrap_or(f64::NAN);
        writeln!(
            w,
            "{},{},{},{},{ter},{}",
            p.name(),
            p.shared_layers,
            p.mask_rate,
            p.loss_weight,
            s.best_step
        )?;
    }
    w.flush()?;
    Ok(out)
}
