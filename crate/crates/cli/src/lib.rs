//! Command-line experiments: corpus synthesis, tokenizer training,
//! pretraining, joint training, evaluation, gradient checks and sweeps.

pub mod commands;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use usted_core::experiment::ToyGradCheck;
use usted_core::tokenizer::Scheme;

use crate::commands::{
    cmd_eval, cmd_gradcheck, cmd_pretrain, cmd_sweep, cmd_synth, cmd_tokenize, cmd_train, write_scores, EvalRequest,
    Metric, SweepAxes,
};
use crate::config::{parse_loss_weight, usage, ExperimentConfig, Overrides, ENCODER_LAYERS};

pub use crate::config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "usted", version, about = "Unified speech and text encoder-decoder experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of initialization and sampling.
    #[arg(long, env = "USTED_SEED")]
    pub seed: Option<u64>,
    /// Corpus directory written by `synth`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Step budget (of the counted task, if one is set).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Encoder layers shared by all tasks.
    #[arg(long = "shared-layers", value_parser = clap::value_parser!(u64).range(0..=ENCODER_LAYERS as u64))]
    pub shared_layers: Option<u64>,
    /// Per-word masking probability of the text task.
    #[arg(long = "mask-rate")]
    pub mask_rate: Option<f64>,
    /// Loss weight of a task, as task=weight; repeatable.
    #[arg(long = "loss-weight", value_parser = parse_loss_weight)]
    pub loss_weight: Vec<(String, f64)>,
    #[arg(long = "no-task-embedding")]
    pub no_task_embedding: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate corpora, manifests, features and vocabularies.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Data seed.
        #[arg(long, env = "USTED_SEED")]
        seed: Option<u64>,
    },
    /// Train a subword vocabulary.
    Tokenize {
        /// Text file with one sentence per line, or a manifest (.tsv).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = usted_core::tokenizer::DEFAULT_VOCAB_SIZE)]
        size: usize,
        #[arg(long, default_value_t = Scheme::Bpe)]
        scheme: Scheme,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a standalone speech recognizer.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Joint multitask training.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Pretrained speech checkpoint whose encoder initializes the model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint or a hypothesis file on a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Metric::Wer)]
        metric: Metric,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Hypothesis file, one line per manifest entry of the task.
        #[arg(long)]
        hyps: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long = "mask-rate", default_value_t = 0.0)]
        mask_rate: f64,
        /// Where to write decoded hypotheses.
        #[arg(long = "write-hyps")]
        write_hyps: Option<PathBuf>,
        /// Score report CSV; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare model gradients with central differences on a toy setup.
    Gradcheck {
        /// JSON settings of the toy check.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "USTED_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per point along the shared-layer, mask-rate and
    /// loss-weight axes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "shared-layers", value_delimiter = ',', value_parser = clap::value_parser!(u64).range(0..=ENCODER_LAYERS as u64))]
        shared_layers: Vec<u64>,
        #[arg(long = "mask-rates", value_delimiter = ',')]
        mask_rates: Vec<f64>,
        #[arg(long = "loss-weights", value_delimiter = ',')]
        loss_weights: Vec<f64>,
    },
}

fn overrides(run: &RunArgs, model: Option<&ModelArgs>) -> Overrides {
    let mut o = Overrides {
        seed: run.seed,
        output_dir: run.out.clone(),
        corpus_dir: run.corpus.clone(),
        steps: run.steps,
        ..Overrides::default()
    };
    if let Some(m) = model {
        o.shared_layers = m.shared_layers.map(|k| k as usize);
        o.mask_rate = m.mask_rate;
        o.loss_weights = m.loss_weight.clone();
        o.no_task_embedding = m.no_task_embedding;
    }
    o
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = ExperimentConfig::resolve(
                config.as_deref(),
                &Overrides {
                    output_dir: out,
                    ..Overrides::default()
                },
            )?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let dir = cmd_synth(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Tokenize {
            corpus,
            size,
            scheme,
            out,
        } => {
            let v = cmd_tokenize(&corpus, size, scheme, &out)?;
            println!("{} tokens -> {}", v.len(), out.display());
        }
        Command::Pretrain { run, model } => {
            let cfg = ExperimentConfig::resolve(run.config.as_deref(), &overrides(&run, Some(&model)))?;
            print_json(&cmd_pretrain(&cfg)?)?;
        }
        Command::Train { run, model, init } => {
            let cfg = ExperimentConfig::resolve(run.config.as_deref(), &overrides(&run, Some(&model)))?;
            print_json(&cmd_train(&cfg, init.as_deref())?)?;
        }
        Command::Eval {
            manifest,
            checkpoint,
            metric,
            beam,
            hyps,
            task,
            vocab,
            mask_rate,
            write_hyps,
            out,
        } => {
            let score = cmd_eval(&EvalRequest {
                manifest,
                metric,
                checkpoint,
                hyps,
                beam,
                task,
                vocab,
                mask_rate,
                write_hyps,
            })?;
            let scores = [score];
            if let Some(path) = out {
                write_scores(fs::File::create(&path)?, &scores)?;
            }
            let mut stdout = std::io::stdout().lock();
            write_scores(&mut stdout, &scores)?;
            stdout.flush()?;
        }
        Command::Gradcheck { config, seed, out } => {
            let mut settings = match config {
                Some(p) => serde_json::from_str::<ToyGradCheck>(&fs::read_to_string(&p)?)
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))?,
                None => ToyGradCheck::default(),
            };
            if let Some(s) = seed {
                settings.seed = s;
            }
            let report = cmd_gradcheck(&settings)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(path) = out {
                fs::write(path, &text)?;
            }
            print!("{text}");
        }
        Command::Sweep {
            run,
            shared_layers,
            mask_rates,
            loss_weights,
        } => {
            let cfg = ExperimentConfig::resolve(run.config.as_deref(), &overrides(&run, None))?;
            let mut axes = SweepAxes::default();
            if !shared_layers.is_empty() {
                axes.shared_layers = shared_layers.into_iter().map(|k| k as usize).collect();
            }
            if !mask_rates.is_empty() {
                axes.mask_rates = mask_rates;
            }
            if !loss_weights.is_empty() {
                axes.loss_weights = loss_weights;
            }
            for (p, s) in cmd_sweep(&cfg, &axes)? {
                println!("{} {:?}", p.name(), s.dev_error_rates);
            }
        }
    }
    Ok(())
}
