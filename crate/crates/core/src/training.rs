//! Deterministic multi-task training with dev-BLEU checkpoint selection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, make_labels, Corpus, Labels, Sample, TaskSpec, Vocabulary};
use crate::decoding::{forced_prefix, greedy_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{bleu, BleuTokenizer, Smoothing};
use crate::model::{compute_total_loss, save_checkpoint, Checkpoint, CheckpointMeta, LossBreakdown, ModelConfig, ModelParams};
use crate::numerics::{adam_step, AdamConfig, AdamState, Rng, Tensor};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "ckpt_best";

pub fn step_checkpoint_name(step: u64) -> String {
    format!("ckpt_step{step}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Linear warmup length; 0 keeps the rate constant.
    pub warmup_steps: u64,
    /// Loss weights `[lid, text ctc, attention]`; overrides the model section when set.
    pub lambdas: Option<[f64; 3]>,
    /// Write a loss record every this many steps (evaluation steps are always logged).
    pub log_every: u64,
    /// Wall time makes logs non-reproducible, so it is off by default.
    pub log_wall_time: bool,
    /// Limit on dev sentences decoded per evaluation; all when unset.
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            max_steps: None,
            patience: 5,
            grad_clip: 5.0,
            seed: 1,
            eval_every: 1,
            warmup_steps: 0,
            lambdas: None,
            log_every: 10,
            log_wall_time: false,
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::usage(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::usage("eval_every and log_every must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::usage("grad_clip must be positive"));
        }
        if self.max_epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::usage("training budget is zero"));
        }
        Ok(())
    }

    /// The model configuration with this run's loss weights applied.
    pub fn apply_lambdas(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut cfg = cfg.clone();
        if let Some([l1, l2, l3]) = self.lambdas {
            cfg.lambda1 = l1;
            cfg.lambda2 = l2;
            cfg.lambda3 = l3;
        }
        cfg
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

/// Dev scorer: higher is better.
pub type Evaluator<'a> = Box<dyn FnMut(&ModelConfig, &ModelParams, &Vocabulary) -> Result<f64> + 'a>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Replaces greedy dev BLEU.
    pub evaluator: Option<Evaluator<'a>>,
    /// Stored in every checkpoint.
    pub experiment: String,
    /// Print evaluation lines to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    /// Set when an output directory was given.
    pub best_path: Option<PathBuf>,
    pub log: Vec<TrainLogRecord>,
    pub evaluations: usize,
    pub stopped_early: bool,
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`; returns the norm before.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Greedy-decode corpus BLEU over `samples`.
pub fn greedy_bleu(cfg: &ModelConfig, params: &ModelParams, vocab: &Vocabulary, task: &TaskSpec, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("no dev samples to evaluate"));
    }
    let dcfg = DecodeConfig::default();
    let mut hyps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let feats: Vec<&Tensor> = chunk.iter().map(|s| &s.features).collect();
        let forced: Vec<Vec<usize>> = chunk.iter().map(|s| forced_prefix(s, task, vocab)).collect::<Result<_>>()?;
        for (toks, _) in greedy_decode(cfg, params, &feats, &forced, &dcfg)? {
            let kept: Vec<usize> = toks.into_iter().filter(|&t| !vocab.is_special(t)).collect();
            hyps.push(vocab.decode(&kept).join(" "));
        }
    }
    let refs: Vec<String> = samples.iter().map(|s| s.text.join(" ")).collect();
    Ok(bleu(&hyps, &refs, BleuTokenizer::Whitespace, Smoothing::None)?.bleu)
}

struct LogSink {
    file: Option<fs::File>,
    path: PathBuf,
    records: Vec<TrainLogRecord>,
}

impl LogSink {
    fn push(&mut self, rec: TrainLogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&rec).map_err(|e| Error::usage(format!("log encoding: {e}")))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Trains a model from scratch on `corpus.train`, selecting by dev score.
///
/// With `out_dir`, writes `ckpt_step{N}` at every evaluation, `ckpt_best`, and
/// a JSON Lines log.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    corpus: &Corpus,
    task: &TaskSpec,
    out_dir: Option<&Path>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if corpus.dev.is_empty() {
        return Err(Error::usage("dev split is empty"));
    }
    task.validate(&corpus.train)?;
    let vocab = build_vocab(corpus, task)?;
    let mut cfg = train_cfg.apply_lambdas(model_cfg);
    cfg.text_vocab = vocab.len();
    cfg.lid_vocab = vocab.lid_len();
    cfg.validate()?;
    for s in corpus.train.iter().chain(&corpus.dev) {
        if s.feature_dim() != cfg.feature_dim {
            return Err(Error::usage(format!(
                "sample {} has feature width {}, model expects {}",
                s.id,
                s.feature_dim(),
                cfg.feature_dim
            )));
        }
    }
    let labels: Vec<Labels> = corpus
        .train
        .iter()
        .map(|s| make_labels(s, task, &vocab))
        .collect::<Result<_>>()?;
    let dev: Vec<Sample> = match train_cfg.dev_limit {
        Some(n) => corpus.dev.iter().take(n.max(1)).cloned().collect(),
        None => corpus.dev.clone(),
    };

    let mut sink = LogSink {
        file: None,
        path: PathBuf::new(),
        records: Vec::new(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        sink.path = dir.join(LOG_FILE);
        sink.file = Some(fs::File::create(&sink.path).map_err(|e| Error::io(&sink.path, e))?);
    }

    let root = Rng::new(train_cfg.seed);
    let mut params = ModelParams::init(&cfg, train_cfg.seed)?;
    let mut opt = AdamState::new(params.tensors());
    let adam = AdamConfig {
        lr: train_cfg.lr,
        ..AdamConfig::default()
    };
    let started = Instant::now();
    let mut step: u64 = 0;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut best_path = None;
    let mut bad_evals = 0;
    let mut evaluations = 0;
    let mut stopped_early = false;
    let n = corpus.train.len();

    'epochs: for epoch in 0..train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.derive(1 << 32 | epoch as u64).shuffle(&mut order);
        let mut pending: Option<TrainLogRecord> = None;
        let mut budget_hit = false;
        for batch in order.chunks(train_cfg.batch_size) {
            let feats: Vec<&Tensor> = batch.iter().map(|&i| &corpus.train[i].features).collect();
            let labs: Vec<&Labels> = batch.iter().map(|&i| &labels[i]).collect();
            let dropout = (cfg.dropout > 0.0).then(|| root.derive(2 << 32 | step));
            let out = compute_total_loss(&cfg, &params, &feats, &labs, dropout)?;
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    what: format!("non-finite loss or gradient {:?}", out.loss),
                });
            }
            let mut grads = out.grads;
            let grad_norm = clip_global_norm(&mut grads, train_cfg.grad_clip);
            let lr = train_cfg.lr_at(step);
            adam_step(params.tensors_mut(), &grads, &mut opt, &AdamConfig { lr, ..adam })?;
            step += 1;
            if let Some(prev) = pending.take().filter(|r| r.step % train_cfg.log_every == 0) {
                sink.push(prev)?;
            }
            pending = Some(TrainLogRecord {
                step,
                epoch,
                loss: out.loss,
                grad_norm,
                dev_bleu: None,
                wall_time: train_cfg.log_wall_time.then(|| started.elapsed().as_secs_f64()),
            });
            if train_cfg.max_steps.is_some_and(|m| step >= m) {
                budget_hit = true;
                break;
            }
        }
        let mut rec = pending.expect("an epoch takes at least one step");
        let final_epoch = budget_hit || epoch + 1 == train_cfg.max_epochs;
        if (epoch + 1) % train_cfg.eval_every != 0 && !final_epoch {
            if rec.step.is_multiple_of(train_cfg.log_every) {
                sink.push(rec)?;
            }
            continue;
        }
        let score = match &mut opts.evaluator {
            Some(f) => f(&cfg, &params, &vocab)?,
            None => greedy_bleu(&cfg, &params, &vocab, task, &dev)?,
        };
        evaluations += 1;
        rec.dev_bleu = Some(score);
        let total = rec.loss.l_total;
        sink.push(rec)?;
        if opts.progress {
            eprintln!(
                "epoch {epoch} step {step} loss {:.4} dev {score:.2}",
                total
            );
        }
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                model: cfg.clone(),
                vocab: vocab.clone(),
                task: *task,
                step,
                experiment: opts.experiment.clone(),
            },
            params: params.clone(),
            opt: Some(opt.clone()),
        };
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(step_checkpoint_name(step)), &ckpt)?;
        }
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            if let Some(dir) = out_dir {
                let p = dir.join(BEST_CHECKPOINT);
                save_checkpoint(&p, &ckpt)?;
                best_path = Some(p);
            }
            best = Some((score, ckpt));
            bad_evals = 0;
        } else {
            bad_evals += 1;
            if bad_evals >= train_cfg.patience.max(1) {
                stopped_early = true;
                break 'epochs;
            }
        }
        if budget_hit {
            break;
        }
    }
    let (_, best) = best.expect("the final epoch is always evaluated");
    Ok(TrainOutcome {
        best,
        best_path,
        log: sink.records,
        evaluations,
        stopped_early,
    })
}

pub fn parse_train_log(text: &str, name: &str) -> Result<Vec<TrainLogRecord>> {
    let mut out: Vec<TrainLogRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainLogRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.last().is_some_and(|p| p.step >= rec.step) {
            return Err(Error::Parse {
                path: name.to_string(),
                line: i + 1,
                message: format!("step {} does not increase", rec.step),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Path of the checkpoint with the highest dev score; ties go to the earliest step.
pub fn select_best_checkpoint(log: &[TrainLogRecord], out_dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(f64, u64)> = None;
    for r in log {
        if let Some(b) = r.dev_bleu {
            if best.is_none_or(|(s, _)| b > s) {
                best = Some((b, r.step));
            }
        }
    }
    let (_, step) = best.ok_or_else(|| Error::usage("log has no dev evaluations"))?;
    Ok(out_dir.join(step_checkpoint_name(step)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_corpus, LanguagePair, SynthConfig, TaskMode};
    use proptest::prelude::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            d_model: 16,
            ff_dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn corpus(train: usize) -> Corpus {
        gen_synthetic_corpus(&SynthConfig {
            languages: vec![LanguagePair::new("bfi", "en")],
            lexicon_size: 8,
            feature_dim: 4,
            sentence_len: [2, 3],
            train_size: train,
            dev_size: 4,
            test_size: 4,
            ..SynthConfig::default()
        })
        .unwrap()
        .corpus
    }

    fn one2one() -> TaskSpec {
        TaskSpec::new(TaskMode::OneToOne, true)
    }

    fn rec(step: u64, dev: Option<f64>) -> TrainLogRecord {
        TrainLogRecord {
            step,
            epoch: 0,
            loss: LossBreakdown::default(),
            grad_norm: 0.0,
            dev_bleu: dev,
            wall_time: None,
        }
    }

    #[test]
    fn best_checkpoint_ties_go_to_earliest() {
        let dir = Path::new("/out");
        let log = vec![rec(1, Some(10.0)), rec(2, None), rec(3, Some(12.0)), rec(4, Some(12.0))];
        assert_eq!(select_best_checkpoint(&log, dir).unwrap(), dir.join("ckpt_step3"));
        assert_eq!(select_best_checkpoint(&log[..1], dir).unwrap(), dir.join("ckpt_step1"));
        assert!(select_best_checkpoint(&[], dir).unwrap_err().is_usage());
        assert!(select_best_checkpoint(&log[1..2], dir).unwrap_err().is_usage());
    }

    #[test]
    fn constant_dev_score_with_patience_two_evaluates_three_times() {
        let c = corpus(8);
        let tcfg = TrainConfig {
            batch_size: 4,
            max_epochs: 20,
            patience: 2,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            evaluator: Some(Box::new(|_, _, _| Ok(7.0))),
            ..TrainOptions::default()
        };
        let out = train(&tiny_model(), &tcfg, &c, &one2one(), None, opts).unwrap();
        assert_eq!(out.evaluations, 3);
        assert!(out.stopped_early);
        assert_eq!(out.best.meta.step, 2);
        let scored: Vec<u64> = out.log.iter().filter(|r| r.dev_bleu.is_some()).map(|r| r.step).collect();
        assert_eq!(scored, vec![2, 4, 6]);
    }

    #[test]
    fn log_is_increasing_linear_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(8);
        let tcfg = TrainConfig {
            batch_size: 3,
            max_epochs: 3,
            log_every: 1,
            ..TrainConfig::default()
        };
        let m = tiny_model();
        let out = train(&m, &tcfg, &c, &one2one(), Some(dir.path()), TrainOptions::default()).unwrap();
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let parsed = parse_train_log(&text, "log").unwrap();
        assert_eq!(parsed.len(), 9);
        for (a, b) in parsed.iter().zip(&out.log) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.dev_bleu, b.dev_bleu);
        }
        for r in &out.log {
            let l = r.loss;
            assert_eq!(l.l_total, m.lambda1 * l.l_lid + m.lambda2 * l.l_txt + m.lambda3 * l.l_attn);
        }
        let best = select_best_checkpoint(&out.log, dir.path()).unwrap();
        assert_eq!(fs::read(best).unwrap(), fs::read(out.best_path.unwrap()).unwrap());
        assert!(parse_train_log("{\"step\":2}\n", "log").is_err());
    }

    #[test]
    fn non_finite_features_abort_with_step() {
        let mut c = corpus(8);
        c.train[0].features.data_mut()[0] = f64::NAN;
        let tcfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let err = train(&tiny_model(), &tcfg, &c, &one2one(), None, TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn single_batch_overfits() {
        let c = corpus(8);
        let m = ModelConfig {
            label_smoothing: 0.0,
            ..tiny_model()
        };
        let tcfg = TrainConfig {
            batch_size: 8,
            max_epochs: 300,
            eval_every: 300,
            log_every: 1,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            evaluator: Some(Box::new(|_, _, _| Ok(0.0))),
            ..TrainOptions::default()
        };
        let out = train(&m, &tcfg, &c, &one2one(), None, opts).unwrap();
        let first = out.log.iter().position(|r| r.loss.l_attn < 0.1);
        assert!(first.is_some(), "final l_attn {}", out.log.last().unwrap().loss.l_attn);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(vals in proptest::collection::vec(-100.0f64..100.0, 2..40), clip in 0.01f64..10.0) {
            let mid = vals.len() / 2;
            let mut grads = vec![
                Tensor::new(vec![mid], vals[..mid].to_vec()).unwrap(),
                Tensor::new(vec![vals.len() - mid], vals[mid..].to_vec()).unwrap(),
            ];
            let before = clip_global_norm(&mut grads, clip);
            let after = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            prop_assert!(after <= clip + 1e-9);
            if before <= clip {
                prop_assert_eq!(after, before);
            }
        }
    }
}
