//! The `slt` command line: data generation, training, decoding, scoring and studies.

pub mod config;
pub mod pipeline;
pub mod studies;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use slt_core::data::{gen_synthetic_corpus, read_manifest, TaskMode};
use slt_core::decoding::{render_hypotheses_tsv, Search};
use slt_core::eval::{
    bleu, compare_runs, length_bucket_report, parse_scores_tsv, render_buckets_csv, render_delta_tsv, render_scores_tsv,
    rouge_l, BleuTokenizer, Smoothing,
};
use slt_core::model::load_checkpoint;
use slt_core::{Error, Result};

use config::ExperimentConfig;
use pipeline::{align, default_threads, load_sentences, read_corpus_dir, split_path, train_experiment, translate_with, write_corpus_dir};

#[derive(Debug, Parser)]
#[command(name = "slt", version, about = "Multilingual sign language translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus as train/dev/test manifests.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints, a JSON Lines log and a config snapshot.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// one2one, many2one or many2many
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Disable the intermediate LID loss.
        #[arg(long)]
        no_lid: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Decode a split with a checkpoint into a hypothesis TSV.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory or a single manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        ctc_weight: Option<f64>,
        /// Attention-only greedy decoding.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against references.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "whitespace")]
        tokenizer: String,
        /// Comma-separated: bleu, rouge
        #[arg(long, default_value = "bleu")]
        metric: String,
        /// Sentence-level floor smoothing instead of plain corpus BLEU.
        #[arg(long)]
        smooth: bool,
        /// Full JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sign-language BLEU as a scores TSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
    },
    /// Reports over decoded output.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Per-language score deltas (b - a) between two scores TSVs.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Universal model against per-language models.
    StudyConflict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LID on/off twins as language pairs are added.
    StudyAblation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ReportKind {
    /// Mean sentence BLEU by reference length bucket.
    Buckets {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 5)]
        width: usize,
        #[arg(long, default_value = "whitespace")]
        tokenizer: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records the arguments of a command that has no experiment config.
fn write_invocation<A: Serialize>(out: &Path, args: &A) -> Result<()> {
    let text = toml::to_string(args).map_err(|e| Error::usage(format!("cannot serialize arguments: {e}")))?;
    let mut p = out.as_os_str().to_owned();
    p.push(".resolved.toml");
    write_file(Path::new(&p), &text)
}

#[derive(Serialize)]
struct EvalArgs<'a> {
    command: &'a str,
    hyp: &'a Path,
    reference: &'a Path,
    tokenizer: &'a str,
    metric: &'a str,
    width: Option<usize>,
    smooth: bool,
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let syn = gen_synthetic_corpus(&cfg.data)?;
            for w in &syn.warnings {
                eprintln!("warning: {w}");
            }
            write_corpus_dir(&out, &syn, cfg.task.tokenizer)?;
            cfg.write_snapshot(&out)?;
            Ok(())
        }
        Command::Train {
            config,
            data,
            task,
            out,
            seed,
            max_epochs,
            max_steps,
            no_lid,
            quiet,
        } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(t) = task {
                cfg.task.mode = t.parse::<TaskMode>()?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = max_epochs {
                cfg.train.max_epochs = e;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            if no_lid {
                cfg.task.lid = false;
            }
            let corpus = read_corpus_dir(&data, cfg.task.tokenizer)?;
            let outcome = train_experiment(&cfg, &corpus, &out, !quiet)?;
            if !quiet {
                eprintln!(
                    "best checkpoint at step {} ({} evaluations{})",
                    outcome.best.meta.step,
                    outcome.evaluations,
                    if outcome.stopped_early { ", stopped early" } else { "" }
                );
            }
            Ok(())
        }
        Command::Translate {
            ckpt,
            data,
            split,
            beam,
            ctc_weight,
            greedy,
            threads,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let mut cfg = if ck.meta.experiment.is_empty() {
                ExperimentConfig::default()
            } else {
                ExperimentConfig::parse(&ck.meta.experiment, &format!("{} (embedded config)", ckpt.display()))?
            };
            if let Some(b) = beam {
                cfg.decode.beam = b;
            }
            if let Some(w) = ctc_weight {
                cfg.decode.ctc_weight = w;
            }
            let path = if data.is_dir() { split_path(&data, &split) } else { data.clone() };
            let samples = read_manifest(&path, cfg.task.tokenizer)?;
            let search = if greedy { Search::Greedy } else { Search::Beam };
            let threads = threads.unwrap_or_else(default_threads).min(default_threads().max(1));
            let hyps = translate_with(&ck, &cfg, &samples, search, threads)?;
            write_file(&out, &render_hypotheses_tsv(&hyps))?;
            let mut snap = out.as_os_str().to_owned();
            snap.push(".resolved.toml");
            write_file(Path::new(&snap), &cfg.to_toml()?)
        }
        Command::Evaluate {
            hyp,
            reference,
            tokenizer,
            metric,
            smooth,
            out,
            scores_out,
        } => {
            let tok: BleuTokenizer = tokenizer.parse()?;
            let metrics: Vec<&str> = metric.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
            if metrics.is_empty() || metrics.iter().any(|m| !matches!(*m, "bleu" | "rouge")) {
                return Err(Error::usage(format!("unknown metric list {metric:?}; use bleu,rouge")));
            }
            let pairs = align(load_sentences(&hyp)?, load_sentences(&reference)?)?;
            let h: Vec<&str> = pairs.iter().map(|(h, _)| h.text.as_str()).collect();
            let r: Vec<&str> = pairs.iter().map(|(_, r)| r.text.as_str()).collect();
            let smoothing = if smooth { Smoothing::Floor } else { Smoothing::None };
            let mut report = bleu(&h, &r, tok, smoothing)?;
            if metrics.contains(&"rouge") {
                report.rouge_l = Some(rouge_l(&h, &r, tok)?);
            }
            if metrics.contains(&"bleu") {
                println!("BLEU\t{:.2}", report.bleu);
            }
            if let Some(rl) = report.rouge_l {
                println!("ROUGE-L\t{rl:.2}");
            }
            if let Some(p) = &out {
                let json = serde_json::to_string_pretty(&report).map_err(|e| Error::usage(e.to_string()))?;
                write_file(p, &(json + "\n"))?;
            }
            if let Some(p) = &scores_out {
                let mut order: Vec<String> = Vec::new();
                for (hs, _) in &pairs {
                    let sl = hs.sl.clone().ok_or_else(|| Error::usage("per-language scores need a hypothesis TSV"))?;
                    if !order.contains(&sl) {
                        order.push(sl);
                    }
                }
                let mut scores = Vec::new();
                for sl in order {
                    let (hh, rr): (Vec<&str>, Vec<&str>) = pairs
                        .iter()
                        .filter(|(hs, _)| hs.sl.as_deref() == Some(sl.as_str()))
                        .map(|(a, b)| (a.text.as_str(), b.text.as_str()))
                        .unzip();
                    scores.push((sl, bleu(&hh, &rr, tok, smoothing)?.bleu));
                }
                write_file(p, &render_scores_tsv(&scores))?;
            }
            if let Some(p) = out.as_ref().or(scores_out.as_ref()) {
                write_invocation(
                    p,
                    &EvalArgs {
                        command: "evaluate",
                        hyp: &hyp,
                        reference: &reference,
                        tokenizer: &tokenizer,
                        metric: &metric,
                        width: None,
                        smooth,
                    },
                )?;
            }
            Ok(())
        }
        Command::Report {
            kind:
                ReportKind::Buckets {
                    hyp,
                    reference,
                    width,
                    tokenizer,
                    out,
                },
        } => {
            let tok: BleuTokenizer = tokenizer.parse()?;
            let pairs = align(load_sentences(&hyp)?, load_sentences(&reference)?)?;
            let h: Vec<&str> = pairs.iter().map(|(h, _)| h.text.as_str()).collect();
            let r: Vec<&str> = pairs.iter().map(|(_, r)| r.text.as_str()).collect();
            let rows = length_bucket_report(&h, &r, width, tok)?;
            write_file(&out, &render_buckets_csv(&rows))?;
            write_invocation(
                &out,
                &EvalArgs {
                    command: "report buckets",
                    hyp: &hyp,
                    reference: &reference,
                    tokenizer: &tokenizer,
                    metric: "bleu",
                    width: Some(width),
                    smooth: true,
                },
            )
        }
        Command::Compare { a, b, out } => {
            let read = |p: &Path| -> Result<Vec<(String, f64)>> {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_scores_tsv(&text, &p.display().to_string())
            };
            let table = compare_runs(&read(&a)?, &read(&b)?)?;
            write_file(&out, &render_delta_tsv(&table))?;
            #[derive(Serialize)]
            struct CompareArgs<'a> {
                command: &'a str,
                a: &'a Path,
                b: &'a Path,
            }
            write_invocation(
                &out,
                &CompareArgs {
                    command: "compare",
                    a: &a,
                    b: &b,
                },
            )
        }
        Command::StudyConflict { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = studies::run_conflict_study(&cfg, &out, default_threads())?;
            print!("{}", render_delta_tsv(&report.deltas));
            Ok(())
        }
        Command::StudyAblation { config, pairs, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = studies::run_ablation(&cfg, pairs, &out, default_threads())?;
            print!("{}", studies::render_ablation_tsv(&report.rows));
            Ok(())
        }
    }
}
