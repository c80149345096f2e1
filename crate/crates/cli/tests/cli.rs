use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn usted() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_usted"));
    c.env_remove("USTED_SEED").env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "synth": {"asr_train": 30, "asr_dev": 6, "mlm_train": 300, "mlm_dev": 4},
  "model": {"size": {"hidden": 8, "attention_dim": 8, "decoder_hidden": 12, "decoder_embed": 8}},
  "train": {"steps": 6, "batch_size": 4, "eval_interval": 3, "count_steps_of": "asr"}
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn read_config(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap()
}

#[test]
fn out_of_range_sharing_is_a_usage_error_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = usted()
        .args(["train", "--shared-layers", "5", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists());

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"shared_layers": 7}}"#).unwrap();
    let out = usted().arg("train").arg("--config").arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shared layers"));
    assert!(!run.exists());
}

#[test]
fn evaluating_references_as_hypotheses_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(usted().arg("synth").arg("--config").arg(tiny_config(dir.path())).arg("--out").arg(&corpus).output().unwrap());
    let manifest = corpus.join("dev.tsv");
    let refs: Vec<String> = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("asr\t"))
        .map(|l| l.rsplit('\t').next().unwrap().to_string())
        .collect();
    let hyps = dir.path().join("hyps.txt");
    fs::write(&hyps, refs.join("\n") + "\n").unwrap();
    for (metric, value) in [("wer", "0"), ("ter", "0"), ("bleu", "100")] {
        let report = dir.path().join(format!("{metric}.csv"));
        let stdout = ok(usted()
            .args(["eval", "--task", "asr", "--metric", metric, "--manifest"])
            .arg(&manifest)
            .arg("--hyps")
            .arg(&hyps)
            .arg("--out")
            .arg(&report)
            .output()
            .unwrap());
        let expected = format!("metric,dataset,value\n{metric},dev,{value}\n");
        assert_eq!(stdout, expected);
        assert_eq!(fs::read_to_string(report).unwrap(), expected);
    }
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    ok(usted().arg("train").arg("--config").arg(&cfg).arg("--out").arg(&a).env("USTED_SEED", "7").output().unwrap());
    assert_eq!(read_config(&a)["seed"], 7);
    assert_eq!(read_config(&a)["train"]["seed"], 7);
    let b = dir.path().join("b");
    ok(usted()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "3", "--out"])
        .arg(&b)
        .env("USTED_SEED", "7")
        .output()
        .unwrap());
    assert_eq!(read_config(&b)["seed"], 3);
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    out.sort();
    out
}

/// Metrics rows without the wall-clock column.
fn metrics_without_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn reruns_rewrite_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let train = |extra: &[&str]| {
        ok(usted().arg("train").arg("--config").arg(&cfg).args(extra).arg("--out").arg(&run).output().unwrap())
    };
    train(&["--mask-rate", "1.0", "--loss-weight", "mlm=2", "--no-task-embedding", "--shared-layers", "2"]);
    let first: Vec<(PathBuf, Vec<u8>)> = files(&run).into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect();
    let metrics = metrics_without_time(&run.join("metrics.csv"));
    train(&["--mask-rate", "1.0", "--loss-weight", "mlm=2", "--no-task-embedding", "--shared-layers", "2"]);
    for (path, bytes) in first {
        if path.ends_with("metrics.csv") {
            assert_eq!(metrics_without_time(&path), metrics);
        } else {
            assert_eq!(fs::read(&path).unwrap(), bytes, "{}", path.display());
        }
    }
    let c = read_config(&run);
    assert_eq!(c["mix"]["mask_rate"], 1.0);
    assert_eq!(c["mix"]["loss_weights"]["mlm"], 2.0);
    assert_eq!(c["model"]["use_task_embedding"], false);
    assert_eq!(c["model"]["shared_layers"], 2);
}

#[test]
fn pipeline_from_corpus_to_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    ok(usted().arg("synth").arg("--config").arg(&cfg).arg("--out").arg(&corpus).output().unwrap());
    assert!(corpus.join("feats").join("train_00000.feat").exists());

    let vocab = dir.path().join("v.txt");
    let said = ok(usted()
        .args(["tokenize", "--size", "50", "--corpus"])
        .arg(corpus.join("train.tsv"))
        .arg("--out")
        .arg(&vocab)
        .output()
        .unwrap());
    assert!(said.starts_with("50 tokens"));

    let pre = dir.path().join("pre");
    ok(usted()
        .arg("pretrain")
        .arg("--config")
        .arg(&cfg)
        .arg("--corpus")
        .arg(&corpus)
        .arg("--no-task-embedding")
        .arg("--out")
        .arg(&pre)
        .output()
        .unwrap());
    let run = dir.path().join("run");
    let summary = ok(usted()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--corpus")
        .arg(&corpus)
        .arg("--init")
        .arg(pre.join("model.ckpt"))
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap());
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["task_steps"]["asr"], 6);
    assert!(summary["dev_error_rates"]["asr"].is_number());

    let hyps = dir.path().join("hyps.txt");
    let report = ok(usted()
        .args(["eval", "--metric", "wer", "--beam", "2", "--manifest"])
        .arg(corpus.join("dev.tsv"))
        .arg("--checkpoint")
        .arg(run.join("model.ckpt"))
        .arg("--write-hyps")
        .arg(&hyps)
        .output()
        .unwrap());
    let value: f64 = report.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(value >= 0.0);
    assert_eq!(fs::read_to_string(&hyps).unwrap().lines().count(), 6);
    // scoring the written hypotheses reproduces the model's score
    let again = ok(usted()
        .args(["eval", "--metric", "wer", "--manifest"])
        .arg(corpus.join("dev.tsv"))
        .arg("--hyps")
        .arg(&hyps)
        .output()
        .unwrap());
    assert_eq!(again, report);

    let ppl = ok(usted()
        .args(["eval", "--metric", "ppl", "--manifest"])
        .arg(corpus.join("dev.tsv"))
        .arg("--checkpoint")
        .arg(run.join("model.ckpt"))
        .output()
        .unwrap());
    let ppl: f64 = ppl.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(ppl > 1.0 && ppl.is_finite());
    let out = usted()
        .args(["eval", "--metric", "ppl", "--manifest"])
        .arg(corpus.join("dev.tsv"))
        .arg("--hyps")
        .arg(&hyps)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    ok(usted().args(["gradcheck", "--seed", "1", "--out"]).arg(&report).output().unwrap());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-3);
    assert_eq!(v["settings"]["seed"], 1);
    assert_eq!(v["settings"]["vocab_size"], 60);
}

#[test]
fn sweep_writes_one_run_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    ok(usted()
        .arg("sweep")
        .arg("--config")
        .arg(&cfg)
        .args(["--shared-layers", "0,3", "--mask-rates", "0.4", "--loss-weights", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap());
    // the single-value axes contribute the base point once
    for name in ["K0_R0.4_W1", "K3_R0.4_W1", "K1_R0.4_W1"] {
        assert!(out.join(name).join("summary.json").exists(), "{name}");
    }
    assert!(!out.join("K2_R0.4_W1").exists());
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(1).unwrap().starts_with("K0_R0.4_W1,0,0.4,1,"));
}
