//! Tab-separated corpus manifests: `task<TAB>input<TAB>target` per line,
//! where a speech input is a feature-file path relative to the manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::batch::{Modality, Sample, SampleInput, TaskSpec};
use super::features::read_features;
use super::speech::FRAME_PERIOD_MS;
use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, EOS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub task: String,
    pub input: String,
    pub target: String,
}

pub fn write_manifest<W: Write>(w: W, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for e in entries {
        for field in [&e.task, &e.input, &e.target] {
            if field.contains(['\t', '\n']) {
                return Err(Error::format("manifest", format!("field {field:?} contains a tab or newline")));
            }
        }
        writeln!(w, "{}\t{}\t{}", e.task, e.input, e.target)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(task), Some(input), Some(target)) => out.push(ManifestEntry {
                task: task.to_string(),
                input: input.to_string(),
                target: target.to_string(),
            }),
            _ => return Err(Error::format("manifest", format!("line {} has fewer than 3 fields", n + 1))),
        }
    }
    Ok(out)
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest(BufReader::new(File::open(path)?))
}

/// Turns manifest entries into per-task sample lists, encoding targets with
/// `output_vocab` and reading speech features relative to `base_dir`.
/// Entries naming tasks outside `tasks` are skipped.
pub fn load_samples(
    entries: &[ManifestEntry],
    tasks: &[TaskSpec],
    output_vocab: &Vocabulary,
    base_dir: &Path,
) -> Result<Vec<Vec<Sample>>> {
    let mut out = vec![Vec::new(); tasks.len()];
    for e in entries {
        let Some(task) = tasks.iter().find(|t| t.name == e.task) else { continue };
        let input = match task.modality {
            Modality::Speech => {
                let f = File::open(base_dir.join(&e.input))?;
                SampleInput::Frames(read_features(BufReader::new(f), FRAME_PERIOD_MS)?)
            }
            Modality::Text => SampleInput::Text(e.input.clone()),
        };
        let mut target = output_vocab.encode(&e.target);
        target.push(EOS);
        out[task.id].push(Sample::new(task.id, input, target)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_validation() {
        let entries = vec![
            ManifestEntry {
                task: "asr".into(),
                input: "feats/000.feat".into(),
                target: "the cat runs".into(),
            },
            ManifestEntry {
                task: "mlm".into(),
                input: "a dog sleeps".into(),
                target: "a dog sleeps".into(),
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&mut buf, &entries).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap().lines().next().unwrap(),
            "asr\tfeats/000.feat\tthe cat runs"
        );
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), entries);
        assert!(read_manifest("only\ttwo\n".as_bytes()).is_err());
        let bad = vec![ManifestEntry {
            task: "t".into(),
            input: "a\tb".into(),
            target: "c".into(),
        }];
        assert!(write_manifest(Vec::new(), &bad).is_err());
    }
}
