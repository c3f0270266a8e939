//! Steps shared by the subcommands and the studies.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use slt_core::data::{read_manifest, write_manifest, Corpus, Sample, SyntheticCorpus, Tokenizer};
use slt_core::decoding::{parse_hypotheses_tsv, translate_corpus, Search, Translation, HYPOTHESIS_HEADER};
use slt_core::eval::{bleu, BleuTokenizer, Smoothing};
use slt_core::model::Checkpoint;
use slt_core::training::{train, TrainOptions, TrainOutcome};
use slt_core::{Error, Result};

use crate::config::ExperimentConfig;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Worker cap from `SLT_THREADS`, else the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("SLT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn write_corpus_dir(dir: &Path, syn: &SyntheticCorpus, tokenizer: Tokenizer) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, samples) in syn.corpus.splits() {
        write_manifest(&split_path(dir, name), samples, tokenizer)?;
    }
    let mut text = String::from("id\tentries\tdurations\n");
    for (id, entries) in &syn.entries {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        let durations = syn.durations.get(id).map_or(String::new(), |d| join(d));
        text.push_str(&format!("{id}\t{}\t{durations}\n", join(entries)));
    }
    let path = dir.join("alignment.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads `train/dev/test.jsonl`; a missing test split is allowed.
pub fn read_corpus_dir(dir: &Path, tokenizer: Tokenizer) -> Result<Corpus> {
    let read = |split: &str, required: bool| -> Result<Vec<Sample>> {
        let p = split_path(dir, split);
        if !required && !p.exists() {
            return Ok(Vec::new());
        }
        read_manifest(&p, tokenizer)
    };
    Ok(Corpus {
        train: read("train", true)?,
        dev: read("dev", true)?,
        test: read("test", false)?,
    })
}

/// Trains under `cfg` and writes checkpoints, the log and a config snapshot to `out`.
pub fn train_experiment(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path, progress: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let experiment = cfg.write_snapshot(out)?;
    train(
        &cfg.model,
        &cfg.train,
        corpus,
        &cfg.task.spec(),
        Some(out),
        TrainOptions {
            experiment,
            progress,
            ..TrainOptions::default()
        },
    )
}

/// Decodes `samples` with the checkpoint's model and `cfg.decode`.
pub fn translate_with(ckpt: &Checkpoint, cfg: &ExperimentConfig, samples: &[Sample], search: Search, threads: usize) -> Result<Vec<Translation>> {
    translate_corpus(
        &ckpt.meta.model,
        &ckpt.params,
        &cfg.decode,
        samples,
        &ckpt.meta.vocab,
        &ckpt.meta.task,
        cfg.task.tokenizer,
        search,
        threads,
    )
}

/// BLEU tokenizer matching how the text was split for training.
pub fn bleu_tokenizer(t: Tokenizer) -> BleuTokenizer {
    match t {
        Tokenizer::Whitespace => BleuTokenizer::Whitespace,
        Tokenizer::Char => BleuTokenizer::Char,
    }
}

/// Corpus BLEU of translations against their samples' reference text.
pub fn corpus_bleu(hyps: &[Translation], refs: &[Sample], tokenizer: Tokenizer) -> Result<f64> {
    let h: Vec<String> = hyps.iter().map(|t| t.text.clone()).collect();
    let r: Vec<String> = refs.iter().map(|s| tokenizer.detokenize(&s.text)).collect();
    Ok(bleu(&h, &r, bleu_tokenizer(tokenizer), Smoothing::None)?.bleu)
}

/// Corpus BLEU per sign language, keyed in order of first appearance.
pub fn bleu_by_sign_language(hyps: &[Translation], refs: &[Sample], tokenizer: Tokenizer) -> Result<Vec<(String, f64)>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<Translation>, Vec<Sample>)> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        if !groups.contains_key(&r.sl) {
            order.push(r.sl.clone());
        }
        let g = groups.entry(r.sl.clone()).or_default();
        g.0.push(h.clone());
        g.1.push(r.clone());
    }
    order
        .into_iter()
        .map(|sl| {
            let (h, r) = &groups[&sl];
            Ok((sl, corpus_bleu(h, r, tokenizer)?))
        })
        .collect()
}

/// A sentence from a plain text, hypothesis or manifest file.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub id: Option<String>,
    pub sl: Option<String>,
    pub text: String,
}

/// Loads sentences: hypothesis TSVs and manifests carry ids, plain text is one sentence per line.
pub fn load_sentences(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let first = text.lines().next().unwrap_or("").trim_end_matches('\r');
    if first == HYPOTHESIS_HEADER {
        return Ok(parse_hypotheses_tsv(&text, &name)?
            .into_iter()
            .map(|r| Sentence {
                id: Some(r.id),
                sl: Some(r.sl),
                text: r.text,
            })
            .collect());
    }
    if first.starts_with('{') {
        let samples = slt_core::data::parse_manifest(text.as_bytes(), &name, Tokenizer::Whitespace)?;
        return Ok(samples
            .into_iter()
            .map(|s| Sentence {
                text: s.text.join(" "),
                id: Some(s.id),
                sl: Some(s.sl),
            })
            .collect());
    }
    Ok(text
        .lines()
        .map(|l| Sentence {
            id: None,
            sl: None,
            text: l.trim_end_matches('\r').to_string(),
        })
        .collect())
}

/// Pairs hypotheses with references, by id when both sides have ids.
pub fn align(hyps: Vec<Sentence>, refs: Vec<Sentence>) -> Result<Vec<(Sentence, Sentence)>> {
    let with_ids = |v: &[Sentence]| !v.is_empty() && v.iter().all(|s| s.id.is_some());
    if with_ids(&hyps) && with_ids(&refs) {
        let mut by_id: BTreeMap<String, Sentence> = BTreeMap::new();
        for r in refs {
            let id = r.id.clone().unwrap_or_default();
            if by_id.insert(id.clone(), r).is_some() {
                return Err(Error::usage(format!("duplicate reference id {id}")));
            }
        }
        return hyps
            .into_iter()
            .map(|h| {
                let id = h.id.clone().unwrap_or_default();
                let r = by_id.remove(&id).ok_or_else(|| Error::usage(format!("no reference for id {id}")))?;
                Ok((h, r))
            })
            .collect();
    }
    if hyps.len() != refs.len() {
        return Err(Error::usage(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    Ok(hyps.into_iter().zip(refs).collect())
}
