//! Run configuration: one JSON document with model, scaling, train,
//! task, and report sections. Unknown keys are rejected in every
//! section, and all defaults are explicit after loading. Command-line
//! flags override file values before resolution.

use delight::error::{Error, Result};
use delight::model::{ModelConfig, TaskKind};
use delight::scaling::ScalingConfig;
use delight::tasks::{make_char_lm_dataset, CharLmData, BUNDLED_TEXT};
use delight::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

fn default_r() -> f64 {
    4.0
}

fn default_true() -> bool {
    true
}

fn default_max_positions() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Vocabulary size. The copy task defaults to 16; `char_lm` derives
    /// it from the text, and a value given here must match.
    #[serde(default)]
    pub vocab: Option<usize>,
    /// Defaults to `d_m`, which skips the embedding projection.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    pub d_m: usize,
    #[serde(default)]
    pub d_o: Option<usize>,
    #[serde(rename = "r", default = "default_r")]
    pub ffn_reduction: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub g_max: Option<usize>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Copy,
    CharLm,
}

fn default_min_len() -> usize {
    4
}

fn default_max_len() -> usize {
    12
}

fn default_holdout() -> usize {
    64
}

fn default_context() -> usize {
    32
}

pub const DEFAULT_COPY_VOCAB: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskName,
    /// Copy task: shortest source length.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    /// Copy task: longest source length.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Copy task: held-out evaluation set size.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    /// Char LM: context window length.
    #[serde(default = "default_context")]
    pub context: usize,
    /// Char LM: UTF-8 text file; omitted means the bundled snippet.
    #[serde(default)]
    pub text_path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_format")]
    pub format: ReportFormat,
    /// Output directory for training artifacts and reports.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_format() -> ReportFormat {
    ReportFormat::Csv
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { format: ReportFormat::Csv, out: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub task: TaskSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// Task data with the vocabulary settled.
pub enum ResolvedTask {
    Copy { vocab: usize, min_len: usize, max_len: usize, holdout: usize },
    CharLm { data: CharLmData },
}

pub struct ResolvedRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: ResolvedTask,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?)
    }

    /// Toy copy-task defaults matching the training harness scale.
    pub fn toy_copy() -> Self {
        let mut scaling = ScalingConfig::new(2, 4, 2.0);
        scaling.blocks = Some(4);
        Self {
            model: ModelSection {
                vocab: Some(DEFAULT_COPY_VOCAB),
                embed_dim: None,
                d_m: 64,
                d_o: None,
                ffn_reduction: 4.0,
                dropout: 0.0,
                g_max: None,
                shuffle: true,
                max_positions: 64,
            },
            scaling,
            train: TrainConfig::default(),
            task: TaskSection {
                kind: TaskName::Copy,
                min_len: default_min_len(),
                max_len: default_max_len(),
                holdout: default_holdout(),
                context: default_context(),
                text_path: None,
            },
            report: ReportSection::default(),
        }
    }

    /// Toy char-LM defaults over the bundled text.
    pub fn toy_char_lm() -> Self {
        let mut cfg = Self::toy_copy();
        cfg.model.vocab = None;
        cfg.task.kind = TaskName::CharLm;
        cfg.model.max_positions = cfg.task.context + 1;
        cfg
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.task.kind {
            TaskName::Copy => TaskKind::Seq2seq,
            TaskName::CharLm => TaskKind::Lm,
        }
    }

    fn load_text(&self) -> Result<String> {
        match &self.task.text_path {
            Some(p) => fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read text {}: {e}", p.display()))
            }),
            None => Ok(BUNDLED_TEXT.to_string()),
        }
    }

    /// Validate every section, settle the vocabulary, and build the
    /// model configuration.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        self.train.validate()?;
        let task = match self.task.kind {
            TaskName::Copy => {
                if self.task.min_len == 0 || self.task.min_len > self.task.max_len {
                    return Err(Error::Config(format!(
                        "copy length range {}..={} is empty",
                        self.task.min_len, self.task.max_len
                    )));
                }
                if self.task.holdout == 0 {
                    return Err(Error::Config("copy holdout must be positive".into()));
                }
                // Greedy decoding runs the target prefix a few positions
                // past the source length before giving up.
                let needed = self.task.max_len + 5;
                if self.model.max_positions < needed {
                    return Err(Error::Config(format!(
                        "max_positions {} cannot cover decoding at max_len {} \
                         (needs at least {needed})",
                        self.model.max_positions, self.task.max_len
                    )));
                }
                ResolvedTask::Copy {
                    vocab: self.model.vocab.unwrap_or(DEFAULT_COPY_VOCAB),
                    min_len: self.task.min_len,
                    max_len: self.task.max_len,
                    holdout: self.task.holdout,
                }
            }
            TaskName::CharLm => {
                if self.task.context == 0 {
                    return Err(Error::Config("char_lm context must be positive".into()));
                }
                if self.model.max_positions < self.task.context {
                    return Err(Error::Config(format!(
                        "max_positions {} below the char_lm context {}",
                        self.model.max_positions, self.task.context
                    )));
                }
                let text = self.load_text()?;
                let data = make_char_lm_dataset(&text, self.task.context, self.train.seed)?;
                if let Some(v) = self.model.vocab {
                    if v != data.vocab {
                        return Err(Error::Config(format!(
                            "model.vocab {v} does not match the vocabulary of {} \
                             derived from the text",
                            data.vocab
                        )));
                    }
                }
                ResolvedTask::CharLm { data }
            }
        };
        let vocab = match &task {
            ResolvedTask::Copy { vocab, .. } => *vocab,
            ResolvedTask::CharLm { data, .. } => data.vocab,
        };
        let model = ModelConfig {
            vocab,
            embed_dim: self.model.embed_dim.unwrap_or(self.model.d_m),
            d_m: self.model.d_m,
            scaling: self.scaling.clone(),
            d_o: self.model.d_o,
            ffn_reduction: self.model.ffn_reduction,
            dropout: self.model.dropout,
            g_max: self.model.g_max,
            shuffle: self.model.shuffle,
            task: self.task_kind(),
            max_positions: self.model.max_positions,
        };
        model.validate()?;
        Ok(ResolvedRun { model, train: self.train.clone(), task })
    }
}
