//! Corpora, vocabularies, label construction, synthetic data and manifest I/O.

mod manifest;
mod synth;
mod vocab;

pub use manifest::{parse_manifest, read_manifest, write_manifest, write_manifest_to, MANIFEST_VERSION};
pub use synth::{gen_synthetic_corpus, LanguagePair, SynthConfig, SyntheticCorpus};
pub use vocab::{build_vocab, lid_tag, spoken_tag, Vocabulary, BLANK, BOS, EOS, LID_BLANK, PAD, UNK};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frame-major sign features: one row per frame.
pub type SignFeatureSequence = Tensor;

/// The ten sign-language / spoken-language pairs, in the order pairs are added
/// when growing a many-to-many system.
pub const SP10_PAIRS: [(&str, &str); 10] = [
    ("csl", "zh"),
    ("bfi", "en"),
    ("swl", "sv"),
    ("ukl", "uk"),
    ("gsg", "de"),
    ("ise", "it"),
    ("rsl", "ru"),
    ("icl", "is"),
    ("bqn", "bg"),
    ("lls", "lt"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Sign language code (ISO 639-3), e.g. `bfi`.
    pub sl: String,
    /// Target spoken language code, e.g. `en`.
    pub lang: String,
    pub features: SignFeatureSequence,
    pub text: Vec<String>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    /// Keeps only samples whose sign language is in `sls`.
    pub fn filter_sign_languages(&self, sls: &[&str]) -> Corpus {
        let keep = |v: &[Sample]| v.iter().filter(|s| sls.contains(&s.sl.as_str())).cloned().collect();
        Corpus {
            train: keep(&self.train),
            dev: keep(&self.dev),
            test: keep(&self.test),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    #[serde(rename = "one2one")]
    OneToOne,
    #[serde(rename = "many2one")]
    ManyToOne,
    #[serde(rename = "many2many")]
    ManyToMany,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one2one" | "one_to_one" => Ok(TaskMode::OneToOne),
            "many2one" | "many_to_one" => Ok(TaskMode::ManyToOne),
            "many2many" | "many_to_many" => Ok(TaskMode::ManyToMany),
            _ => Err(Error::usage(format!("unknown task mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub mode: TaskMode,
    pub lid_enabled: bool,
}

impl TaskSpec {
    pub fn new(mode: TaskMode, lid_enabled: bool) -> Self {
        TaskSpec { mode, lid_enabled }
    }

    /// Checks the corpus shape the mode requires.
    pub fn validate(&self, samples: &[Sample]) -> Result<()> {
        let pairs: BTreeSet<(&str, &str)> = samples
            .iter()
            .map(|s| (s.sl.as_str(), s.lang.as_str()))
            .collect();
        let langs: BTreeSet<&str> = pairs.iter().map(|p| p.1).collect();
        match self.mode {
            TaskMode::OneToOne if pairs.len() > 1 => Err(Error::usage(format!(
                "one-to-one corpus holds {} language pairs",
                pairs.len()
            ))),
            TaskMode::ManyToOne if langs.len() > 1 => Err(Error::usage(format!(
                "many-to-one corpus targets {} spoken languages",
                langs.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// Training targets for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    /// `<bos> [<lang>] text <eos>`, the decoder's teacher-forcing sequence.
    pub attn: Vec<usize>,
    /// `attn` without `<bos>`/`<eos>`.
    pub txt_ctc: Vec<usize>,
    /// One LID id per `txt_ctc` token, when LID is enabled.
    pub lid: Option<Vec<usize>>,
}

pub fn make_labels(sample: &Sample, task: &TaskSpec, vocab: &Vocabulary) -> Result<Labels> {
    if sample.text.is_empty() {
        return Err(Error::usage(format!("sample {} has empty text", sample.id)));
    }
    let lid_id = vocab.lid_id(&sample.sl)?;
    let lang_tag = vocab.spoken_tag_id(&sample.lang)?;
    let mut txt_ctc = Vec::with_capacity(sample.text.len() + 1);
    if task.mode == TaskMode::ManyToMany {
        txt_ctc.push(lang_tag);
    }
    txt_ctc.extend(vocab.encode(&sample.text));
    let mut attn = Vec::with_capacity(txt_ctc.len() + 2);
    attn.push(BOS);
    attn.extend_from_slice(&txt_ctc);
    attn.push(EOS);
    let lid = task.lid_enabled.then(|| vec![lid_id; txt_ctc.len()]);
    Ok(Labels { attn, txt_ctc, lid })
}

/// Splits raw text into tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    /// One token per non-whitespace character, for scripts written without spaces.
    Char,
}

impl Tokenizer {
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(String::from).collect(),
            Tokenizer::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }

    pub fn detokenize<S: AsRef<str>>(self, tokens: &[S]) -> String {
        let sep = match self {
            Tokenizer::Whitespace => " ",
            Tokenizer::Char => "",
        };
        tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(sep)
    }
}
