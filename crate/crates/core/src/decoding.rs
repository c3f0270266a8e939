//! Greedy and joint CTC/attention beam-search decoding.
//!
//! The attention decoder proposes and scores candidates; the final-layer text CTC
//! prefix probability is mixed in with weight `ctc_weight`.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_greedy_decode, ctc_prefix_score, CtcPosteriors, CtcPrefixState};
use crate::data::{Sample, TaskMode, TaskSpec, Tokenizer, Vocabulary, BLANK, BOS, EOS, LID_BLANK, PAD};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Net};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    /// Length normalization exponent applied at final ranking.
    pub length_alpha: f64,
    /// Fixed output length limit; by default `2 * frames + 5`.
    pub max_len: Option<usize>,
    /// Upper bound on the default limit.
    pub max_len_cap: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            ctc_weight: 0.3,
            length_alpha: 1.0,
            max_len: None,
            max_len_cap: 200,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::usage("beam must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::usage(format!("ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !(self.length_alpha >= 0.0) {
            return Err(Error::usage("length_alpha must be non-negative"));
        }
        Ok(())
    }

    /// Generated-token limit for an encoder output of `frames` rows.
    pub fn limit(&self, frames: usize) -> usize {
        self.max_len.unwrap_or_else(|| (2 * frames + 5).min(self.max_len_cap)).max(1)
    }
}

/// A beam-search candidate.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Starts with `<bos>`; finished hypotheses end with `<eos>`.
    pub tokens: Vec<usize>,
    pub attn_score: f64,
    /// CTC prefix log-probability; for finished hypotheses the full sequence probability.
    pub ctc_score: f64,
    pub ctc_state: CtcPrefixState,
    /// `(1 - ctc_weight) * attn_score + ctc_weight * ctc_score`.
    pub score: f64,
    /// `score / generated_len^alpha`.
    pub norm_score: f64,
    pub finished: bool,
    pub truncated: bool,
}

impl Hypothesis {
    /// Tokens after `<bos>` and before `<eos>`.
    pub fn body(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }

    fn normalize(&mut self, alpha: f64) {
        let n = (self.tokens.len() - 1).max(1) as f64;
        self.norm_score = self.score / n.powf(alpha);
    }
}

fn allowed(tok: usize) -> bool {
    tok != PAD && tok != BOS && tok != BLANK
}

/// Index of the largest allowed entry; ties go to the lowest id.
fn argmax_allowed(row: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && v > row[best] {
            best = i;
        }
    }
    best
}

fn mix(mu: f64, attn: f64, ctc: f64) -> f64 {
    if mu == 0.0 {
        attn
    } else {
        (1.0 - mu) * attn + mu * ctc
    }
}

/// Encoder memory and text posteriors for one sequence.
struct Encoded {
    memory: Tensor,
    txt: CtcPosteriors,
}

fn encode_one(cfg: &ModelConfig, params: &ModelParams, features: &Tensor) -> Result<Encoded> {
    let mut net = Net::new(cfg, params, false, None);
    let e = net.encode_batch(&[features])?;
    let memory = net.g.value(e.memory).clone();
    let txt = net.g.value(e.txt_logp).clone();
    if !memory.is_finite() || !txt.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: "non-finite encoder output during decoding".into(),
        });
    }
    Ok(Encoded {
        memory,
        txt: CtcPosteriors::from_log_probs_unchecked(txt, BLANK),
    })
}

/// Last-position log-probabilities for each prefix, all attending to one memory.
fn next_logp(cfg: &ModelConfig, params: &ModelParams, memory: &Tensor, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    let mut net = Net::new(cfg, params, false, None);
    let m = net.g.constant_ref(memory);
    let source = vec![0; prefixes.len()];
    let out = net.decode_batch(m, &[(0, memory.rows())], &source, prefixes)?;
    let lp = net.g.value(out);
    let mut row = 0;
    Ok(prefixes
        .iter()
        .map(|p| {
            row += p.len();
            lp.row(row - 1).to_vec()
        })
        .collect())
}

/// Attention-only greedy decoding of a batch.
///
/// Returns the generated tokens after `<bos>` (the forced prefix included, `<eos>`
/// excluded) and whether each sequence hit the length limit.
pub fn greedy_decode(
    cfg: &ModelConfig,
    params: &ModelParams,
    features: &[&Tensor],
    forced: &[Vec<usize>],
    dcfg: &DecodeConfig,
) -> Result<Vec<(Vec<usize>, bool)>> {
    if features.len() != forced.len() {
        return Err(Error::usage("one forced prefix per input is required"));
    }
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let mut net = Net::new(cfg, params, false, None);
    let e = net.encode_batch(features)?;
    let memory = net.g.value(e.memory).clone();
    let segments = e.segments.clone();
    drop(net);
    let mut seqs: Vec<Vec<usize>> = forced
        .iter()
        .map(|f| std::iter::once(BOS).chain(f.iter().copied()).collect())
        .collect();
    let limits: Vec<usize> = segments.iter().map(|&(_, n)| dcfg.limit(n)).collect();
    let mut done: Vec<Option<bool>> = vec![None; seqs.len()];
    for (i, s) in seqs.iter().enumerate() {
        if s.len() > limits[i] {
            done[i] = Some(true);
        }
    }
    loop {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| done[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let mut net = Net::new(cfg, params, false, None);
        let m = net.g.constant_ref(&memory);
        let prefixes: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let out = net.decode_batch(m, &segments, &active, &prefixes)?;
        let lp = net.g.value(out);
        let mut row = 0;
        let picks: Vec<usize> = prefixes
            .iter()
            .map(|p| {
                row += p.len();
                argmax_allowed(lp.row(row - 1))
            })
            .collect();
        drop(net);
        for (&i, tok) in active.iter().zip(picks) {
            if tok == EOS {
                done[i] = Some(false);
            } else {
                seqs[i].push(tok);
                if seqs[i].len() > limits[i] {
                    done[i] = Some(true);
                }
            }
        }
    }
    Ok(seqs
        .into_iter()
        .zip(done)
        .map(|(s, d)| (s[1..].to_vec(), d.unwrap_or(true)))
        .collect())
}

/// Joint CTC/attention beam search over one feature sequence.
///
/// Returns at most `beam` hypotheses ranked by normalized score. If none
/// finishes within the length limit, the best unfinished one is returned with
/// `truncated` set.
pub fn beam_search(
    cfg: &ModelConfig,
    params: &ModelParams,
    dcfg: &DecodeConfig,
    features: &Tensor,
    forced: &[usize],
) -> Result<Vec<Hypothesis>> {
    dcfg.validate()?;
    if let Some(&bad) = forced.iter().find(|&&t| t >= cfg.text_vocab || !allowed(t) || t == EOS) {
        return Err(Error::usage(format!("forced token {bad} is not a valid output token")));
    }
    let enc = encode_one(cfg, params, features)?;
    let limit = dcfg.limit(enc.memory.rows());
    let mu = dcfg.ctc_weight;
    let use_ctc = mu > 0.0;

    let mut root = Hypothesis {
        tokens: vec![BOS],
        attn_score: 0.0,
        ctc_score: 0.0,
        ctc_state: CtcPrefixState::initial(&enc.txt),
        score: 0.0,
        norm_score: 0.0,
        finished: false,
        truncated: false,
    };
    if !forced.is_empty() {
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(forced);
        let lp = {
            let mut net = Net::new(cfg, params, false, None);
            let m = net.g.constant_ref(&enc.memory);
            let out = net.decode_batch(m, &[(0, enc.memory.rows())], &[0], &[&prefix[..prefix.len() - 1]])?;
            net.g.value(out).clone()
        };
        for (i, &tok) in forced.iter().enumerate() {
            root.attn_score += lp.get(i, tok);
            if use_ctc {
                let (delta, st) = ctc_prefix_score(&root.ctc_state, tok, &enc.txt)?;
                root.ctc_score += delta;
                root.ctc_state = st;
            }
        }
        root.tokens = prefix;
        root.score = mix(mu, root.attn_score, root.ctc_score);
    }

    let beam = dcfg.beam;
    let pre_beam = (beam + beam / 2).max(beam).min(cfg.text_vocab);
    let mut active = vec![root];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut steps = active[0].tokens.len() - 1;
    while !active.is_empty() && steps < limit {
        let prefixes: Vec<&[usize]> = active.iter().map(|h| h.tokens.as_slice()).collect();
        let rows = next_logp(cfg, params, &enc.memory, &prefixes)?;
        // (score, hyp index, token, attn, ctc, state)
        let mut cands: Vec<(f64, usize, usize, f64, f64, Option<CtcPrefixState>)> = Vec::new();
        for (hi, (h, row)) in active.iter().zip(&rows).enumerate() {
            let mut order: Vec<usize> = (0..row.len()).filter(|&t| allowed(t)).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(pre_beam) {
                let attn = h.attn_score + row[tok];
                let (ctc, state) = if !use_ctc {
                    (0.0, None)
                } else if tok == EOS {
                    (h.ctc_state.finalize(), None)
                } else {
                    let (delta, st) = ctc_prefix_score(&h.ctc_state, tok, &enc.txt)?;
                    (h.ctc_score + delta, Some(st))
                };
                cands.push((mix(mu, attn, ctc), hi, tok, attn, ctc, state));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (score, hi, tok, attn, ctc, state) in cands {
            let parent = &active[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut h = Hypothesis {
                tokens,
                attn_score: attn,
                ctc_score: ctc,
                ctc_state: state.unwrap_or_else(|| parent.ctc_state.clone()),
                score,
                norm_score: 0.0,
                finished: tok == EOS,
                truncated: false,
            };
            h.normalize(dcfg.length_alpha);
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        active = next;
        steps += 1;
        if finished.len() >= beam {
            // extensions only lower the raw score
            let worst = finished.iter().map(|h| h.score).fold(f64::INFINITY, f64::min);
            if active.iter().all(|h| h.score < worst) {
                break;
            }
        }
    }
    let mut out = if finished.is_empty() {
        active
            .into_iter()
            .map(|mut h| {
                h.truncated = true;
                h.normalize(dcfg.length_alpha);
                h
            })
            .collect()
    } else {
        finished
    };
    out.sort_by(|a, b| b.norm_score.total_cmp(&a.norm_score).then(a.tokens.cmp(&b.tokens)));
    if out.iter().all(|h| h.truncated) {
        out.truncate(1);
    } else {
        out.truncate(beam);
    }
    Ok(out)
}

/// Intermediate LID head greedy decode for one sequence.
pub fn lid_greedy_decode(cfg: &ModelConfig, params: &ModelParams, features: &Tensor) -> Result<Vec<usize>> {
    let mut net = Net::new(cfg, params, false, None);
    let e = net.encode_batch(&[features])?;
    let lp = net.g.value(e.lid_logp).clone();
    Ok(ctc_greedy_decode(&CtcPosteriors::from_log_probs_unchecked(lp, LID_BLANK)))
}

/// The decoded translation of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub id: String,
    pub sl: String,
    pub lang: String,
    /// Output tokens with reserved tokens and language tags removed.
    pub tokens: Vec<String>,
    pub text: String,
    pub score: f64,
    pub truncated: bool,
}

/// Forced decoder prefix for a sample under `task`.
pub fn forced_prefix(sample: &Sample, task: &TaskSpec, vocab: &Vocabulary) -> Result<Vec<usize>> {
    Ok(match task.mode {
        TaskMode::ManyToMany => vec![vocab.spoken_tag_id(&sample.lang)?],
        _ => Vec::new(),
    })
}

/// Search strategy for corpus translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    Greedy,
    Beam,
}

/// Translates every sample; results come back in input order.
#[allow(clippy::too_many_arguments)]
pub fn translate_corpus(
    cfg: &ModelConfig,
    params: &ModelParams,
    dcfg: &DecodeConfig,
    samples: &[Sample],
    vocab: &Vocabulary,
    task: &TaskSpec,
    tokenizer: Tokenizer,
    search: Search,
    threads: usize,
) -> Result<Vec<Translation>> {
    dcfg.validate()?;
    let mut ids = HashSet::new();
    for s in samples {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::usage(format!("duplicate sample id {}", s.id)));
        }
        if s.feature_dim() != cfg.feature_dim {
            return Err(Error::usage(format!(
                "sample {} has feature width {}, model expects {}",
                s.id,
                s.feature_dim(),
                cfg.feature_dim
            )));
        }
    }
    let forced: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| forced_prefix(s, task, vocab))
        .collect::<Result<_>>()?;
    let finish = |s: &Sample, toks: &[usize], score: f64, truncated: bool| {
        let kept: Vec<usize> = toks.iter().copied().filter(|&t| !vocab.is_special(t)).collect();
        let tokens = vocab.decode(&kept);
        Translation {
            id: s.id.clone(),
            sl: s.sl.clone(),
            lang: s.lang.clone(),
            text: tokenizer.detokenize(&tokens),
            tokens,
            score,
            truncated,
        }
    };
    match search {
        Search::Greedy => {
            const CHUNK: usize = 32;
            let mut out = Vec::with_capacity(samples.len());
            for (chunk, fchunk) in samples.chunks(CHUNK).zip(forced.chunks(CHUNK)) {
                let feats: Vec<&Tensor> = chunk.iter().map(|s| &s.features).collect();
                let res = greedy_decode(cfg, params, &feats, fchunk, dcfg)?;
                for (s, (toks, trunc)) in chunk.iter().zip(res) {
                    out.push(finish(s, &toks, f64::NAN, trunc));
                }
            }
            Ok(out)
        }
        Search::Beam => {
            let one = |i: usize| -> Result<Translation> {
                let s = &samples[i];
                let hyps = beam_search(cfg, params, dcfg, &s.features, &forced[i])?;
                let best = &hyps[0];
                Ok(finish(s, best.body(), best.norm_score, best.truncated))
            };
            let threads = threads.max(1).min(samples.len().max(1));
            if threads == 1 {
                return (0..samples.len()).map(one).collect();
            }
            let results: Vec<Result<Translation>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|w| {
                        let one = &one;
                        scope.spawn(move || {
                            (w..samples.len())
                                .step_by(threads)
                                .map(|i| (i, one(i)))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                let mut all: Vec<(usize, Result<Translation>)> = handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("decoder worker panicked"))
                    .collect();
                all.sort_by_key(|(i, _)| *i);
                all.into_iter().map(|(_, r)| r).collect()
            });
            results.into_iter().collect()
        }
    }
}

pub const HYPOTHESIS_HEADER: &str = "id\tsl\tlang\thyp\tscore\ttruncated";

fn clean_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn render_hypotheses_tsv(rows: &[Translation]) -> String {
    let mut out = format!("{HYPOTHESIS_HEADER}\n");
    for t in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            clean_field(&t.id),
            clean_field(&t.sl),
            clean_field(&t.lang),
            clean_field(&t.text),
            t.score,
            t.truncated
        );
    }
    out
}

/// One row of a hypothesis file.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisRow {
    pub id: String,
    pub sl: String,
    pub lang: String,
    pub text: String,
    pub score: f64,
    pub truncated: bool,
}

pub fn parse_hypotheses_tsv(text: &str, name: &str) -> Result<Vec<HypothesisRow>> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == HYPOTHESIS_HEADER => {}
        _ => return Err(err(1, format!("expected header {HYPOTHESIS_HEADER:?}"))),
    }
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(err(i + 1, format!("expected 6 columns, found {}", cols.len())));
        }
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| err(i + 1, format!("bad score {:?}", cols[4])))?;
        let truncated = match cols[5] {
            "true" => true,
            "false" => false,
            other => return Err(err(i + 1, format!("bad truncated flag {other:?}"))),
        };
        if !ids.insert(cols[0].to_string()) {
            return Err(err(i + 1, format!("duplicate id {}", cols[0])));
        }
        out.push(HypothesisRow {
            id: cols[0].into(),
            sl: cols[1].into(),
            lang: cols[2].into(),
            text: cols[3].into(),
            score,
            truncated,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss;
    use crate::numerics::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            d_model: 8,
            ff_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 2,
            dropout: 0.0,
            text_vocab: 10,
            lid_vocab: 3,
            ..ModelConfig::default()
        }
    }

    fn feats(frames: usize, rng: &mut Rng) -> Tensor {
        Tensor::matrix(frames, 3, (0..frames * 3).map(|_| rng.normal()).collect())
    }

    #[test]
    fn degenerate_beam_equals_greedy() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 5).unwrap();
        let dcfg = DecodeConfig {
            beam: 1,
            ctc_weight: 0.0,
            max_len: Some(8),
            ..DecodeConfig::default()
        };
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let n = rng.int_in(2, 9);
            let x = feats(n, &mut rng);
            let g = greedy_decode(&cfg, &p, &[&x], &[vec![]], &dcfg).unwrap();
            let b = beam_search(&cfg, &p, &dcfg, &x, &[]).unwrap();
            assert_eq!(b[0].body(), g[0].0.as_slice());
            assert_eq!(b[0].truncated, g[0].1);
        }
    }

    #[test]
    fn forced_prefix_leads_every_hypothesis() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 6).unwrap();
        let x = feats(6, &mut Rng::new(2));
        let hyps = beam_search(&cfg, &p, &DecodeConfig::default(), &x, &[5]).unwrap();
        assert!(!hyps.is_empty() && hyps.len() <= 5);
        for h in &hyps {
            assert_eq!(&h.tokens[..2], &[BOS, 5]);
        }
        assert!(hyps.windows(2).all(|w| w[0].norm_score >= w[1].norm_score));
    }

    #[test]
    fn finished_ctc_scores_are_full_sequence_probabilities() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 7).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let x = feats(6, &mut rng);
            let enc = encode_one(&cfg, &p, &x).unwrap();
            let dcfg = DecodeConfig {
                max_len: Some(4),
                ..DecodeConfig::default()
            };
            for h in beam_search(&cfg, &p, &dcfg, &x, &[]).unwrap() {
                if !h.finished {
                    continue;
                }
                match ctc_loss(&enc.txt, h.body()) {
                    Ok((loss, _)) => assert!((h.ctc_score + loss).abs() < 1e-6),
                    Err(_) => assert_eq!(h.ctc_score, f64::NEG_INFINITY),
                }
            }
        }
    }

    #[test]
    fn limit_defaults_and_caps() {
        let d = DecodeConfig::default();
        assert_eq!(d.limit(10), 25);
        assert_eq!(d.limit(1000), 200);
        assert!(DecodeConfig { beam: 0, ..d.clone() }.validate().is_err());
        assert!(DecodeConfig { ctc_weight: 1.5, ..d }.validate().is_err());
    }

    #[test]
    fn hypothesis_tsv_roundtrip() {
        let rows = vec![Translation {
            id: "a".into(),
            sl: "bfi".into(),
            lang: "en".into(),
            tokens: vec!["hi".into()],
            text: "hi".into(),
            score: -0.5,
            truncated: false,
        }];
        let parsed = parse_hypotheses_tsv(&render_hypotheses_tsv(&rows), "mem").unwrap();
        assert_eq!(parsed[0].text, "hi");
        assert_eq!(parsed[0].score, -0.5);
        assert!(parse_hypotheses_tsv("nope\n", "mem").is_err());
        let dup = format!("{HYPOTHESIS_HEADER}\na\tx\ty\tz\t0\tfalse\na\tx\ty\tz\t0\tfalse\n");
        assert!(matches!(parse_hypotheses_tsv(&dup, "mem").unwrap_err(), Error::Parse { line: 3, .. }));
    }
}
