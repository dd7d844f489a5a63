//! Run configuration: one JSON document with explicit defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusFormat, PipelineConfig, Task};
use crate::denoise::DenoiseConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::sampler::UnrollConfig;
use crate::tokenizer::{TokenizerMode, BYTE_VOCAB_SIZE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    PrefixLm,
    SpanCorruption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    /// Upper bound on the word vocabulary, reserved ids included.
    pub max_vocab: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { mode: TokenizerMode::Byte, max_vocab: 8192 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training corpus: plain documents for pretraining, records for finetuning.
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    /// Records used for periodic evaluation.
    pub eval_corpus: Option<PathBuf>,
    /// Vocabulary file; built from the corpus and written to `out_dir` when absent.
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: None, corpus_format: CorpusFormat::Plain, eval_corpus: None, vocab: None, out_dir: PathBuf::from("runs/nardec") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub denoise: DenoiseConfig,
    pub optimizer: AdamConfig,
    pub tokenizer: TokenizerConfig,
    pub objective: Objective,
    /// Downstream format used by finetuning.
    pub task: Task,
    pub batch_size: usize,
    /// Step budget; training stops when the step counter reaches it.
    pub steps: u64,
    pub log_every: u64,
    /// Zero disables intermediate checkpoints; a final one is always written.
    pub checkpoint_every: u64,
    /// Zero disables periodic evaluation.
    pub eval_every: u64,
    pub eval_examples: usize,
    pub decode: UnrollConfig,
    pub seed: u64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pipeline: PipelineConfig::default(),
            denoise: DenoiseConfig::default(),
            optimizer: AdamConfig::default(),
            tokenizer: TokenizerConfig::default(),
            objective: Objective::PrefixLm,
            task: Task::Synthetic,
            batch_size: 16,
            steps: 2000,
            log_every: 50,
            checkpoint_every: 500,
            eval_every: 0,
            eval_examples: 64,
            decode: UnrollConfig::default(),
            seed: 0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pipeline.validate()?;
        self.denoise.validate()?;
        if self.tokenizer.mode == TokenizerMode::Byte && self.model.vocab != BYTE_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "byte tokenizer needs model.vocab = {BYTE_VOCAB_SIZE}, got {}",
                self.model.vocab
            )));
        }
        if self.tokenizer.mode == TokenizerMode::Word && self.tokenizer.max_vocab <= 4 {
            return Err(Error::Config("tokenizer.max_vocab must exceed the 4 reserved ids".into()));
        }
        let p = &self.pipeline;
        for (what, len) in [("prefix_len + target_len", p.prefix_len + p.target_len), ("input_budget + target_budget", p.input_budget + p.target_budget)] {
            if len > self.model.max_seq {
                return Err(Error::Config(format!("{what} = {len} exceeds model.max_seq = {}", self.model.max_seq)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.optimizer.lr)));
        }
        if self.decode.steps == 0 {
            return Err(Error::Config("decode.steps must be at least 1".into()));
        }
        Ok(())
    }
}
