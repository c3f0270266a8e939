//! Individual-vs-universal conflict study and the LID ablation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use slt_core::data::{gen_synthetic_corpus, Corpus, TaskMode};
use slt_core::decoding::Search;
use slt_core::eval::{compare_runs, render_delta_tsv, render_scores_tsv, DeltaTable};
use slt_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::pipeline::{bleu_by_sign_language, corpus_bleu, train_experiment, translate_with};

/// Runs independent jobs on up to `threads` workers; results keep job order.
pub fn run_jobs<T: Send>(jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>, threads: usize) -> Result<Vec<T>> {
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let n = jobs.len();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let mut results: Vec<(usize, Result<T>)> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let next = queue.lock().expect("job queue poisoned").pop();
                        match next {
                            Some((i, job)) => done.push((i, job())),
                            None => return done,
                        }
                    }
                })
            })
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("study worker panicked"))
            .collect()
    });
    debug_assert_eq!(results.len(), n);
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

fn sign_languages(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.data.languages.iter().map(|p| p.sl.clone()).collect()
}

fn check_pairs(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.data.languages.len() < 2 {
        return Err(Error::usage(format!(
            "study needs at least 2 language pairs, config has {}",
            cfg.data.languages.len()
        )));
    }
    let sls: BTreeSet<&str> = cfg.data.languages.iter().map(|p| p.sl.as_str()).collect();
    if sls.len() != cfg.data.languages.len() {
        return Err(Error::usage("each sign language may appear in only one pair"));
    }
    Ok(())
}

fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.data.seed = seed;
    c.train.seed = seed;
    c
}

/// Trains under `cfg` on `corpus`, beam-decodes the test split and returns the
/// translations' BLEU per sign language and overall.
fn train_and_score(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path) -> Result<(Vec<(String, f64)>, f64)> {
    if corpus.test.is_empty() {
        return Err(Error::usage("study corpus has an empty test split"));
    }
    let outcome = train_experiment(cfg, corpus, out, false)?;
    let hyps = translate_with(&outcome.best, cfg, &corpus.test, Search::Beam, 1)?;
    let path = out.join("test_hyp.tsv");
    fs::write(&path, slt_core::decoding::render_hypotheses_tsv(&hyps)).map_err(|e| Error::io(&path, e))?;
    Ok((
        bleu_by_sign_language(&hyps, &corpus.test, cfg.task.tokenizer)?,
        corpus_bleu(&hyps, &corpus.test, cfg.task.tokenizer)?,
    ))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mean_over_seeds(runs: &[Vec<(String, f64)>]) -> Vec<(String, f64)> {
    runs[0]
        .iter()
        .map(|(k, _)| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.iter().find(|(q, _)| q == k).map(|p| p.1)).collect();
            (k.clone(), vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ConflictReport {
    /// Per sign language, averaged over seeds.
    pub individual: Vec<(String, f64)>,
    pub universal: Vec<(String, f64)>,
    /// `universal - individual`.
    pub deltas: DeltaTable,
    pub per_seed: Vec<DeltaTable>,
}

/// One universal many-to-one model against one model per sign language, all
/// with LID disabled and identical budgets and seeds.
///
/// Writes `individual_scores.tsv`, `universal_scores.tsv` and `deltas.tsv`.
pub fn run_conflict_study(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<ConflictReport> {
    cfg.validate()?;
    check_pairs(cfg)?;
    let spoken: BTreeSet<&str> = cfg.data.languages.iter().map(|p| p.lang.as_str()).collect();
    if spoken.len() != 1 {
        return Err(Error::usage("the conflict study needs a many-to-one corpus (one spoken language)"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_snapshot(out)?;
    let sls = sign_languages(cfg);
    let mut base = cfg.clone();
    base.task.lid = false;
    base.train.lambdas = Some([0.0, cfg.model.lambda2, cfg.model.lambda3]);

    type Job<'a> = Box<dyn FnOnce() -> Result<(Vec<(String, f64)>, f64)> + Send + 'a>;
    let mut corpora = Vec::new();
    for &seed in &cfg.study.seeds {
        corpora.push(gen_synthetic_corpus(&seeded(cfg, seed).data)?.corpus);
    }
    let mut jobs: Vec<Job> = Vec::new();
    for (si, &seed) in cfg.study.seeds.iter().enumerate() {
        let dir = out.join(format!("seed{seed}"));
        let corpus = &corpora[si];
        let mut uni = seeded(&base, seed);
        uni.task.mode = TaskMode::ManyToOne;
        let d = dir.join("universal");
        jobs.push(Box::new(move || train_and_score(&uni, corpus, &d)));
        for sl in &sls {
            let mut ind = seeded(&base, seed);
            ind.task.mode = TaskMode::OneToOne;
            let d = dir.join(format!("individual_{sl}"));
            let sub = corpus.filter_sign_languages(&[sl.as_str()]);
            jobs.push(Box::new(move || train_and_score(&ind, &sub, &d)));
        }
    }
    let results = run_jobs(jobs, threads)?;

    let per = sls.len() + 1;
    let mut uni_runs = Vec::new();
    let mut ind_runs = Vec::new();
    let mut per_seed = Vec::new();
    for (si, &seed) in cfg.study.seeds.iter().enumerate() {
        let chunk = &results[si * per..(si + 1) * per];
        let universal = chunk[0].0.clone();
        let individual: Vec<(String, f64)> = sls
            .iter()
            .zip(&chunk[1..])
            .map(|(sl, (scores, _))| (sl.clone(), scores.first().map_or(0.0, |p| p.1)))
            .collect();
        let universal: Vec<(String, f64)> = sls
            .iter()
            .map(|sl| (sl.clone(), universal.iter().find(|(k, _)| k == sl).map_or(0.0, |p| p.1)))
            .collect();
        let deltas = compare_runs(&individual, &universal)?;
        let dir = out.join(format!("seed{seed}"));
        write(&dir.join("individual_scores.tsv"), &render_scores_tsv(&individual))?;
        write(&dir.join("universal_scores.tsv"), &render_scores_tsv(&universal))?;
        write(&dir.join("deltas.tsv"), &render_delta_tsv(&deltas))?;
        per_seed.push(deltas);
        ind_runs.push(individual);
        uni_runs.push(universal);
    }
    let individual = mean_over_seeds(&ind_runs);
    let universal = mean_over_seeds(&uni_runs);
    let deltas = compare_runs(&individual, &universal)?;
    write(&out.join("individual_scores.tsv"), &render_scores_tsv(&individual))?;
    write(&out.join("universal_scores.tsv"), &render_scores_tsv(&universal))?;
    write(&out.join("deltas.tsv"), &render_delta_tsv(&deltas))?;
    Ok(ConflictReport {
        individual,
        universal,
        deltas,
        per_seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub pairs: usize,
    /// Mean test BLEU over seeds with `lambda1 = 0`.
    pub without_lid: f64,
    pub with_lid: f64,
    pub per_seed: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub order: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub fn render_ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("pairs\tw/o LID\tw LID\n");
    for r in rows {
        let _ = writeln!(out, "({0}\u{2192}{0})\t{1:.2}\t{2:.2}", r.pairs, r.without_lid, r.with_lid);
    }
    out
}

/// Sign languages ranked by one-to-one dev BLEU, best first; ties keep config order.
pub fn rank_by_one_to_one(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<Vec<String>> {
    let seed = cfg.study.seeds[0];
    let c = seeded(cfg, seed);
    let corpus = gen_synthetic_corpus(&c.data)?.corpus;
    let sls = sign_languages(cfg);
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<f64> + Send + '_>> = Vec::new();
    for sl in &sls {
        let mut one = c.clone();
        one.task.mode = TaskMode::OneToOne;
        let sub = corpus.filter_sign_languages(&[sl.as_str()]);
        let d = out.join(format!("rank_{sl}"));
        jobs.push(Box::new(move || {
            let o = train_experiment(&one, &sub, &d, false)?;
            Ok(o.log.iter().filter_map(|r| r.dev_bleu).fold(f64::NEG_INFINITY, f64::max))
        }));
    }
    let scores = run_jobs(jobs, threads)?;
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().map(|(i, _)| sls[i].clone()).collect())
}

/// Adds language pairs one at a time (2..=`pairs`) and trains LID-on/LID-off
/// twins on the many-to-many corpus at each count.
///
/// Writes `ablation.tsv` (rows `(n→n)`, columns w/o and w LID) and `order.txt`.
pub fn run_ablation(cfg: &ExperimentConfig, pairs: usize, out: &Path, threads: usize) -> Result<AblationReport> {
    cfg.validate()?;
    check_pairs(cfg)?;
    if pairs < 2 || pairs > cfg.data.languages.len() {
        return Err(Error::usage(format!(
            "--pairs must be between 2 and {}, got {pairs}",
            cfg.data.languages.len()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_snapshot(out)?;
    let order = match &cfg.study.order {
        Some(o) => {
            let known: BTreeSet<String> = sign_languages(cfg).into_iter().collect();
            let given: BTreeSet<String> = o.iter().cloned().collect();
            if given.len() != o.len() || !given.is_subset(&known) || o.len() < pairs {
                return Err(Error::usage(format!(
                    "study.order must list {pairs} or more distinct configured sign languages"
                )));
            }
            o.clone()
        }
        None => rank_by_one_to_one(cfg, out, threads)?,
    };
    write(&out.join("order.txt"), &(order.join("\n") + "\n"))?;

    let mut corpora = Vec::new();
    for &seed in &cfg.study.seeds {
        corpora.push(gen_synthetic_corpus(&seeded(cfg, seed).data)?.corpus);
    }
    let (l2, l3) = (cfg.model.lambda2, cfg.model.lambda3);
    type Job<'a> = Box<dyn FnOnce() -> Result<(Vec<(String, f64)>, f64)> + Send + 'a>;
    let mut jobs: Vec<Job> = Vec::new();
    for (si, &seed) in cfg.study.seeds.iter().enumerate() {
        for n in 2..=pairs {
            let keep: Vec<&str> = order[..n].iter().map(String::as_str).collect();
            let sub = corpora[si].filter_sign_languages(&keep);
            for (tag, l1) in [("without_lid", 0.0), ("with_lid", 1.0)] {
                let mut c = seeded(cfg, seed);
                c.task.mode = TaskMode::ManyToMany;
                c.task.lid = true;
                c.train.lambdas = Some([l1, l2, l3]);
                let d = out.join(format!("seed{seed}/pairs{n}_{tag}"));
                let sub = sub.clone();
                jobs.push(Box::new(move || train_and_score(&c, &sub, &d)));
            }
        }
    }
    let results = run_jobs(jobs, threads)?;
    let counts = pairs - 1;
    let mut rows = Vec::new();
    for (ni, n) in (2..=pairs).enumerate() {
        let per_seed: Vec<(f64, f64)> = (0..cfg.study.seeds.len())
            .map(|si| {
                let base = (si * counts + ni) * 2;
                (results[base].1, results[base + 1].1)
            })
            .collect();
        let k = per_seed.len() as f64;
        rows.push(AblationRow {
            pairs: n,
            without_lid: per_seed.iter().map(|p| p.0).sum::<f64>() / k,
            with_lid: per_seed.iter().map(|p| p.1).sum::<f64>() / k,
            per_seed,
        });
    }
    write(&out.join("ablation.tsv"), &render_ablation_tsv(&rows))?;
    Ok(AblationReport { order, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jobs_keep_order_across_workers() {
        let jobs: Vec<Box<dyn FnOnce() -> Result<usize> + Send>> =
            (0..7usize).map(|i| Box::new(move || Ok(i * i)) as Box<dyn FnOnce() -> Result<usize> + Send>).collect();
        assert_eq!(run_jobs(jobs, 3).unwrap(), vec![0, 1, 4, 9, 16, 25, 36]);
    }

    #[test]
    fn ablation_table_layout() {
        let rows = vec![AblationRow {
            pairs: 4,
            without_lid: 4.98,
            with_lid: 6.31,
            per_seed: vec![],
        }];
        assert_eq!(render_ablation_tsv(&rows), "pairs\tw/o LID\tw LID\n(4\u{2192}4)\t4.98\t6.31\n");
    }

    #[test]
    fn studies_need_two_pairs() {
        let cfg = ExperimentConfig::default();
        let dir = std::env::temp_dir();
        assert!(run_conflict_study(&cfg, &dir, 1).unwrap_err().is_usage());
        assert!(run_ablation(&cfg, 2, &dir, 1).unwrap_err().is_usage());
    }
}
