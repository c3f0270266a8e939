use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Corpus, TaskSpec};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const BLANK: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<blank>"];

/// Blank index of the LID head's output space.
pub const LID_BLANK: usize = 0;

/// Token/id maps for the text side plus the compact LID tag space.
///
/// Text ids: reserved `0..5`, then one `<lang>` tag per spoken language, then words.
/// LID ids: `0` is blank, sign language `i` (sorted) is `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabParts", into = "VocabParts")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    spoken: Vec<String>,
    signed: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabParts {
    spoken_languages: Vec<String>,
    sign_languages: Vec<String>,
    words: Vec<String>,
}

impl TryFrom<VocabParts> for Vocabulary {
    type Error = Error;
    fn try_from(p: VocabParts) -> Result<Self> {
        Vocabulary::new(p.spoken_languages, p.sign_languages, p.words)
    }
}

impl From<Vocabulary> for VocabParts {
    fn from(v: Vocabulary) -> Self {
        let words = v.tokens[RESERVED.len() + v.spoken.len()..].to_vec();
        VocabParts {
            spoken_languages: v.spoken,
            sign_languages: v.signed,
            words,
        }
    }
}

pub fn spoken_tag(lang: &str) -> String {
    format!("<{lang}>")
}

pub fn lid_tag(sl: &str) -> String {
    format!("<{sl}>")
}

impl Vocabulary {
    pub fn new(spoken: Vec<String>, signed: Vec<String>, words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(spoken.iter().map(|l| spoken_tag(l)));
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::usage(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        if !signed.iter().all(|s| seen.insert(s)) {
            return Err(Error::usage("duplicate sign language code"));
        }
        Ok(Vocabulary {
            tokens,
            index,
            spoken,
            signed,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lid_len(&self) -> usize {
        self.signed.len() + 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Maps tokens to ids; anything unseen becomes `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn spoken_languages(&self) -> &[String] {
        &self.spoken
    }

    pub fn sign_languages(&self) -> &[String] {
        &self.signed
    }

    pub fn spoken_tag_id(&self, lang: &str) -> Result<usize> {
        self.id(&spoken_tag(lang))
            .filter(|_| self.spoken.iter().any(|l| l == lang))
            .ok_or_else(|| Error::usage(format!("unknown spoken language {lang:?}")))
    }

    pub fn lid_id(&self, sl: &str) -> Result<usize> {
        self.signed
            .iter()
            .position(|s| s == sl)
            .map(|i| i + 1)
            .ok_or_else(|| Error::usage(format!("unknown sign language {sl:?}")))
    }

    pub fn lid_token(&self, id: usize) -> String {
        if id == LID_BLANK {
            RESERVED[BLANK].to_string()
        } else {
            lid_tag(&self.signed[id - 1])
        }
    }

    /// Reserved tokens and language tags; stripped from translations.
    pub fn is_special(&self, id: usize) -> bool {
        id < RESERVED.len() + self.spoken.len()
    }
}

/// Builds the vocabulary from the training split only.
pub fn build_vocab(corpus: &Corpus, task: &TaskSpec) -> Result<Vocabulary> {
    if corpus.train.is_empty() {
        return Err(Error::usage("training split is empty"));
    }
    task.validate(&corpus.train)?;
    let mut words = BTreeSet::new();
    let mut spoken = BTreeSet::new();
    let mut signed = BTreeSet::new();
    for s in &corpus.train {
        spoken.insert(s.lang.clone());
        signed.insert(s.sl.clone());
        for w in &s.text {
            words.insert(w.clone());
        }
    }
    let spoken: Vec<String> = spoken.into_iter().collect();
    let reserved: BTreeSet<String> = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(spoken.iter().map(|l| spoken_tag(l)))
        .collect();
    let words = words.into_iter().filter(|w| !reserved.contains(w)).collect();
    Vocabulary::new(spoken, signed.into_iter().collect(), words)
}
