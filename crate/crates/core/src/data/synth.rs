//! Synthetic multilingual sign-feature corpora with a known alignment.
//!
//! Each sign language owns a lexicon of `K` sign prototypes (feature vectors).
//! The first `floor(overlap * K)` prototypes are identical in every language but
//! map to language-specific target words, which is the language conflict a
//! shared model has to resolve. Corpora are parallel: sample `i` of a split uses
//! the same lexicon entries, durations and noise in every language.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguagePair {
    pub sl: String,
    pub lang: String,
}

impl LanguagePair {
    pub fn new(sl: &str, lang: &str) -> Self {
        LanguagePair {
            sl: sl.into(),
            lang: lang.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub languages: Vec<LanguagePair>,
    pub lexicon_size: usize,
    /// Fraction of prototypes shared by all sign languages.
    pub overlap: f64,
    pub feature_dim: usize,
    /// Inclusive range of frames per sign before jitter.
    pub frames_per_sign: [usize; 2],
    pub noise: f64,
    /// Maximum extra repeated frames per sign.
    pub jitter: usize,
    /// Inclusive range of words per sentence.
    pub sentence_len: [usize; 2],
    /// Fraction of lexicon entries whose word trades places with the next word
    /// in the text (the features keep sign order).
    pub p_swap: f64,
    /// Samples per language in each split.
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            languages: vec![LanguagePair::new("bfi", "en")],
            lexicon_size: 50,
            overlap: 0.0,
            feature_dim: 16,
            frames_per_sign: [2, 3],
            noise: 0.05,
            jitter: 0,
            sentence_len: [3, 6],
            p_swap: 0.0,
            train_size: 2000,
            dev_size: 100,
            test_size: 100,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if self.languages.is_empty() {
            return bad("synthetic config lists no languages".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if !(0.0..=1.0).contains(&self.p_swap) {
            return bad(format!("p_swap {} outside [0, 1]", self.p_swap));
        }
        if self.lexicon_size == 0 || self.feature_dim == 0 {
            return bad("lexicon_size and feature_dim must be positive".into());
        }
        let [lmin, lmax] = self.sentence_len;
        if lmin == 0 || lmin > lmax {
            return bad(format!("invalid sentence_len {:?}", self.sentence_len));
        }
        if lmax > 1 && self.lexicon_size < 2 {
            return bad("sentences longer than one sign need lexicon_size >= 2".into());
        }
        let [fmin, fmax] = self.frames_per_sign;
        if fmin == 0 || fmin > fmax {
            return bad(format!("invalid frames_per_sign {:?}", self.frames_per_sign));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        let mut seen = HashSet::new();
        if !self.languages.iter().all(|p| seen.insert(&p.sl)) {
            return bad("a sign language appears twice".into());
        }
        Ok(())
    }

    pub fn shared_count(&self) -> usize {
        (self.overlap * self.lexicon_size as f64).floor() as usize
    }
}

/// A generated corpus plus its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Lexicon entries (prototype ids) of every sample, keyed by sample id, in sign order.
    pub entries: BTreeMap<String, Vec<usize>>,
    /// Frames spent on each sign, keyed by sample id.
    pub durations: BTreeMap<String, Vec<usize>>,
    pub warnings: Vec<String>,
}

struct Language {
    pair: LanguagePair,
    prototypes: Vec<Vec<f64>>,
    /// entry -> target word index
    words: Vec<usize>,
    /// entry -> whether its word swaps with the following one
    swaps: Vec<bool>,
}

struct Draft {
    entries: Vec<usize>,
    durations: Vec<usize>,
    noise: Vec<f64>,
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn gen_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let shared_n = cfg.shared_count();
    if shared_n > 0 && cfg.languages.len() < 2 {
        warnings.push(format!(
            "{shared_n} shared prototypes but only one language: no conflict is possible"
        ));
    }
    let root = Rng::new(cfg.seed);
    let (k, d) = (cfg.lexicon_size, cfg.feature_dim);

    let mut shared_rng = root.derive(1);
    let shared: Vec<Vec<f64>> = (0..shared_n).map(|_| normal_vec(&mut shared_rng, d)).collect();
    let langs: Vec<Language> = cfg
        .languages
        .iter()
        .enumerate()
        .map(|(li, pair)| {
            let mut rng = root.derive(100 + li as u64);
            let mut prototypes = shared.clone();
            prototypes.extend((shared_n..k).map(|_| normal_vec(&mut rng, d)));
            let mut words: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut words);
            let swaps = (0..k).map(|_| rng.bernoulli(cfg.p_swap)).collect();
            Language {
                pair: pair.clone(),
                prototypes,
                words,
                swaps,
            }
        })
        .collect();

    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let mut corpus = Corpus::default();
    let mut entries = BTreeMap::new();
    let mut durations = BTreeMap::new();
    for (si, split) in SPLITS.iter().enumerate() {
        let size = [cfg.train_size, cfg.dev_size, cfg.test_size][si];
        let split_rng = root.derive(10 + si as u64);
        let mut out = Vec::with_capacity(size * langs.len());
        for i in 0..size {
            let draft = draw_unique(cfg, &split_rng, i as u64, &mut used)?;
            for lang in &langs {
                let s = render(cfg, lang, &draft, &format!("{split}-{}-{i:05}", lang.pair.sl));
                entries.insert(s.id.clone(), draft.entries.clone());
                durations.insert(s.id.clone(), draft.durations.clone());
                out.push(s);
            }
        }
        match si {
            0 => corpus.train = out,
            1 => corpus.dev = out,
            _ => corpus.test = out,
        }
    }
    Ok(SyntheticCorpus {
        corpus,
        entries,
        durations,
        warnings,
    })
}

/// Draws sample `index` of a split, redrawing until its entry sequence is unused.
fn draw_unique(cfg: &SynthConfig, split_rng: &Rng, index: u64, used: &mut HashSet<Vec<usize>>) -> Result<Draft> {
    const MAX_ATTEMPTS: u64 = 1000;
    let [lmin, lmax] = cfg.sentence_len;
    let [fmin, fmax] = cfg.frames_per_sign;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = split_rng.derive(index * MAX_ATTEMPTS + attempt);
        let len = rng.int_in(lmin, lmax);
        // adjacent signs never repeat an entry, so every boundary is visible
        let mut entries: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let e = if i == 0 {
                rng.int_in(0, cfg.lexicon_size - 1)
            } else {
                let e = rng.int_in(0, cfg.lexicon_size - 2);
                e + usize::from(e >= entries[i - 1])
            };
            entries.push(e);
        }
        if used.contains(&entries) {
            continue;
        }
        let durations: Vec<usize> = (0..len)
            .map(|_| rng.int_in(fmin, fmax) + rng.int_in(0, cfg.jitter))
            .collect();
        let frames: usize = durations.iter().sum();
        let noise = if cfg.noise > 0.0 {
            normal_vec(&mut rng, frames * cfg.feature_dim)
        } else {
            vec![0.0; frames * cfg.feature_dim]
        };
        used.insert(entries.clone());
        return Ok(Draft {
            entries,
            durations,
            noise,
        });
    }
    Err(Error::usage(
        "could not draw enough distinct sentences; enlarge the lexicon or sentence lengths",
    ))
}

fn render(cfg: &SynthConfig, lang: &Language, draft: &Draft, id: &str) -> Sample {
    let d = cfg.feature_dim;
    let frames: usize = draft.durations.iter().sum();
    let mut data = Vec::with_capacity(frames * d);
    for (&e, &n) in draft.entries.iter().zip(&draft.durations) {
        for _ in 0..n {
            data.extend_from_slice(&lang.prototypes[e]);
        }
    }
    for (x, z) in data.iter_mut().zip(&draft.noise) {
        // stored at the precision manifests keep
        *x = (*x + cfg.noise * z) as f32 as f64;
    }
    let mut order: Vec<usize> = draft.entries.clone();
    let mut i = 0;
    while i + 1 < order.len() {
        if lang.swaps[order[i]] {
            order.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    let text = order
        .iter()
        .map(|&e| format!("{}{:03}", lang.pair.lang, lang.words[e]))
        .collect();
    Sample {
        id: id.to_string(),
        sl: lang.pair.sl.clone(),
        lang: lang.pair.lang.clone(),
        features: Tensor::matrix(frames, d, data),
        text,
    }
}
