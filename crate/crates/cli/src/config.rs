//! TOML experiment configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slt_core::data::{SynthConfig, TaskMode, TaskSpec, Tokenizer};
use slt_core::decoding::DecodeConfig;
use slt_core::model::ModelConfig;
use slt_core::training::TrainConfig;
use slt_core::{Error, Result};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub mode: TaskMode,
    /// Train the intermediate LID head.
    pub lid: bool,
    /// How manifest text is split into tokens.
    pub tokenizer: Tokenizer,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            mode: TaskMode::OneToOne,
            lid: true,
            tokenizer: Tokenizer::Whitespace,
        }
    }
}

impl TaskSection {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec::new(self.mode, self.lid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    /// One run per seed; each seed drives both data generation and training.
    pub seeds: Vec<u64>,
    /// Sign-language order in which pairs are added by the ablation; by default
    /// pairs are ranked by one-to-one dev BLEU.
    pub order: Option<Vec<String>>,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            seeds: vec![1],
            order: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: SynthConfig,
    pub task: TaskSection,
    pub study: StudySection,
}

impl ExperimentConfig {
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: name.to_string(),
            line: e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::usage(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<String> {
        let text = self.to_toml()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        Ok(text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decode.validate()?;
        if self.study.seeds.is_empty() {
            return Err(Error::usage("study.seeds is empty"));
        }
        Ok(())
    }
}
