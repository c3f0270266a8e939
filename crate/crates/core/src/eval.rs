//! BLEU, ROUGE-L, length-bucket analysis and per-language delta tables.
//!
//! The BLEU core follows sacreBLEU's arithmetic (n-gram clipping against a single
//! reference, `floor` smoothing, brevity penalty and the `log(0)` sentinel) so
//! that scores agree on pre-tokenized input.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;
const FLOOR_VALUE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuTokenizer {
    #[default]
    Whitespace,
    /// Punctuation-splitting rules of the mteval 13a tokenizer.
    Simple13a,
    /// Every non-space character is a token.
    Char,
}

impl FromStr for BleuTokenizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "none" => Ok(BleuTokenizer::Whitespace),
            "simple13a" | "13a" => Ok(BleuTokenizer::Simple13a),
            "char" => Ok(BleuTokenizer::Char),
            _ => Err(Error::usage(format!("unknown tokenizer {s:?}"))),
        }
    }
}

impl BleuTokenizer {
    pub fn name(self) -> &'static str {
        match self {
            BleuTokenizer::Whitespace => "whitespace",
            BleuTokenizer::Simple13a => "simple13a",
            BleuTokenizer::Char => "char",
        }
    }

    pub fn tokenize(self, line: &str) -> Vec<String> {
        match self {
            BleuTokenizer::Whitespace => line.split_whitespace().map(String::from).collect(),
            BleuTokenizer::Char => line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
            BleuTokenizer::Simple13a => tokenize_13a(line)
                .split_whitespace()
                .map(String::from)
                .collect(),
        }
    }
}

fn tokenize_13a(line: &str) -> String {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        [
            (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    });
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in rules {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Zero n-gram matches count as 0.1 matches.
    Floor,
}

impl FromStr for Smoothing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Smoothing::None),
            "floor" => Ok(Smoothing::Floor),
            _ => Err(Error::usage(format!("unknown smoothing {s:?}"))),
        }
    }
}

impl Smoothing {
    pub fn name(self) -> &'static str {
        match self {
            Smoothing::None => "none",
            Smoothing::Floor => "floor",
        }
    }
}

/// Sufficient statistics of BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub sys_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let mut st = BleuStats {
            sys_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(hyp, n);
            let rc = ngram_counts(reference, n);
            st.total[n - 1] = hyp.len().saturating_sub(n - 1);
            st.correct[n - 1] = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
        }
        st
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.correct[n] += o.correct[n];
            self.total[n] += o.total[n];
        }
        self.sys_len += o.sys_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn my_log(x: f64) -> f64 {
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

/// Score, precisions (percent) and brevity penalty from statistics.
pub fn compute_bleu(st: &BleuStats, smoothing: Smoothing, effective_order: bool) -> (f64, [f64; MAX_ORDER], f64) {
    let mut precisions = [0.0; MAX_ORDER];
    let mut eff = MAX_ORDER;
    for n in 1..=MAX_ORDER {
        if st.total[n - 1] == 0 {
            break;
        }
        if effective_order {
            eff = n;
        }
        precisions[n - 1] = if st.correct[n - 1] == 0 {
            match smoothing {
                Smoothing::Floor => 100.0 * FLOOR_VALUE / st.total[n - 1] as f64,
                Smoothing::None => 0.0,
            }
        } else {
            100.0 * st.correct[n - 1] as f64 / st.total[n - 1] as f64
        };
    }
    let bp = if st.sys_len >= st.ref_len {
        1.0
    } else if st.sys_len == 0 {
        0.0
    } else {
        (1.0 - st.ref_len as f64 / st.sys_len as f64).exp()
    };
    let log_sum: f64 = precisions[..eff].iter().map(|&p| my_log(p)).sum();
    let score = bp * (log_sum / eff as f64).exp();
    (score, precisions, bp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub sys_len: usize,
    pub ref_len: usize,
    pub rouge_l: Option<f64>,
    pub sentence_bleu: Vec<f64>,
    pub tokenizer: String,
    pub smoothing: String,
}

fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::usage(format!("{hyps} hypotheses but {refs} references")));
    }
    Ok(())
}

/// Sentence BLEU with floor smoothing and effective order.
pub fn sentence_bleu(hyp: &[String], reference: &[String]) -> f64 {
    compute_bleu(&BleuStats::of(hyp, reference), Smoothing::Floor, true).0
}

/// Corpus BLEU-4 with per-sentence scores.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], tokenizer: BleuTokenizer, smoothing: Smoothing) -> Result<MetricReport> {
    check_lengths(hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Err(Error::usage("BLEU needs at least one sentence"));
    }
    let mut total = BleuStats::default();
    let mut sentence = Vec::with_capacity(hyps.len());
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenizer.tokenize(h.as_ref()), tokenizer.tokenize(r.as_ref()));
        let st = BleuStats::of(&h, &r);
        total.add(&st);
        sentence.push(sentence_bleu(&h, &r));
    }
    let (score, precisions, bp) = compute_bleu(&total, smoothing, false);
    Ok(MetricReport {
        bleu: score,
        precisions,
        brevity_penalty: bp,
        sys_len: total.sys_len,
        ref_len: total.ref_len,
        rouge_l: None,
        sentence_bleu: sentence,
        tokenizer: tokenizer.name().into(),
        smoothing: smoothing.name().into(),
    })
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-averaged ROUGE-L F1 on a 0 to 100 scale.
pub fn rouge_l<S: AsRef<str>>(hyps: &[S], refs: &[S], tokenizer: BleuTokenizer) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Err(Error::usage("ROUGE-L needs at least one sentence"));
    }
    let mut sum = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenizer.tokenize(h.as_ref()), tokenizer.tokenize(r.as_ref()));
        sum += if h.is_empty() && r.is_empty() {
            1.0
        } else {
            let l = lcs(&h, &r) as f64;
            if l == 0.0 {
                0.0
            } else {
                let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
                2.0 * p * rc / (p + rc)
            }
        };
    }
    Ok(100.0 * sum / hyps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mean_bleu: f64,
}

/// Mean sentence BLEU per reference-length interval `[1..w], [w+1..2w], ..`.
///
/// Empty intervals are omitted; empty references fall in the first interval.
pub fn length_bucket_report<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    width: usize,
    tokenizer: BleuTokenizer,
) -> Result<Vec<BucketRow>> {
    check_lengths(hyps.len(), refs.len())?;
    if width == 0 {
        return Err(Error::usage("bucket width must be at least 1"));
    }
    if hyps.is_empty() {
        return Err(Error::usage("length buckets need a non-empty corpus"));
    }
    let mut buckets: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenizer.tokenize(h.as_ref()), tokenizer.tokenize(r.as_ref()));
        let k = (r.len().max(1) - 1) / width;
        let e = buckets.entry(k).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += sentence_bleu(&h, &r);
    }
    Ok(buckets
        .into_iter()
        .map(|(k, (count, sum))| BucketRow {
            lo: k * width + 1,
            hi: (k + 1) * width,
            count,
            mean_bleu: sum / count as f64,
        })
        .collect())
}

pub fn render_buckets_csv(rows: &[BucketRow]) -> String {
    let mut out = String::from("lo,hi,count,mean_bleu\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.4}", r.lo, r.hi, r.count, r.mean_bleu);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub language: String,
    pub score_a: f64,
    pub score_b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
    pub mean: DeltaRow,
}

fn key_set<'a>(scores: &'a [(String, f64)], which: &str) -> Result<BTreeSet<&'a str>> {
    let mut keys = BTreeSet::new();
    for (k, _) in scores {
        if !keys.insert(k.as_str()) {
            return Err(Error::usage(format!("language {k} appears twice in run {which}")));
        }
    }
    Ok(keys)
}

/// Per-language `b - a` in `a`'s row order, plus an unweighted mean row.
pub fn compare_runs(a: &[(String, f64)], b: &[(String, f64)]) -> Result<DeltaTable> {
    let (ka, kb) = (key_set(a, "a")?, key_set(b, "b")?);
    if ka != kb || a.is_empty() {
        let only_a: Vec<&str> = ka.difference(&kb).copied().collect();
        let only_b: Vec<&str> = kb.difference(&ka).copied().collect();
        return Err(Error::usage(format!(
            "language keys differ: missing from b {only_a:?}, missing from a {only_b:?}"
        )));
    }
    let bmap: HashMap<&str, f64> = b.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let rows: Vec<DeltaRow> = a
        .iter()
        .map(|(k, sa)| {
            let sb = bmap[k.as_str()];
            DeltaRow {
                language: k.clone(),
                score_a: *sa,
                score_b: sb,
                delta: sb - sa,
            }
        })
        .collect();
    let n = rows.len() as f64;
    let ma = rows.iter().map(|r| r.score_a).sum::<f64>() / n;
    let mb = rows.iter().map(|r| r.score_b).sum::<f64>() / n;
    Ok(DeltaTable {
        mean: DeltaRow {
            language: "mean".into(),
            score_a: ma,
            score_b: mb,
            delta: mb - ma,
        },
        rows,
    })
}

pub fn render_delta_tsv(t: &DeltaTable) -> String {
    let mut out = String::from("language\tscore_a\tscore_b\tdelta\n");
    for r in t.rows.iter().chain(std::iter::once(&t.mean)) {
        let _ = writeln!(out, "{}\t{:.2}\t{:.2}\t{:.2}", r.language, r.score_a, r.score_b, r.delta);
    }
    out
}

/// Parses a two-column `language<TAB>score` file; a header line starting with
/// `language` is skipped.
pub fn parse_scores_tsv(text: &str, name: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (i == 0 && line.starts_with("language")) {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            message,
        };
        let mut cols = line.split('\t');
        let (Some(lang), Some(score), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(err("expected two tab-separated columns".into()));
        };
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| err(format!("bad score {score:?}")))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score {score}")));
        }
        out.push((lang.trim().to_string(), score));
    }
    Ok(out)
}

pub fn render_scores_tsv(scores: &[(String, f64)]) -> String {
    let mut out = String::from("language\tscore\n");
    for (k, v) in scores {
        let _ = writeln!(out, "{k}\t{v:.4}");
    }
    out
}
