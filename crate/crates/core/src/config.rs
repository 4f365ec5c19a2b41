//! Run configuration: one TOML file describing a full experiment.
//!
//! A run file has `[model]`, `[train]`, `[data]`, `[quant]` and `[eval]`
//! sections plus a top-level `seed` and optional `out_dir`. The attention
//! normalizer may be given as its own `[softmax]` section; resolving the
//! config stitches it into the model block and propagates the top-level
//! seed into the trainer, so a resolved snapshot is self-contained and a
//! rerun from it reproduces the original bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{pack, synth_corpus, PackMode, PackedDataset, Vocab};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::quant::QuantScheme;
use crate::softmax::SoftmaxConfig;
use crate::train::TrainConfig;
use crate::{LabError, Result};

// ---------------------------------------------------------------------------
// Data block
// ---------------------------------------------------------------------------

/// Where the tokens come from and how they are packed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Plain-text corpus file. Absent means the built-in synthetic corpus.
    pub corpus: Option<PathBuf>,
    /// Seed for the synthetic corpus when no file is given.
    pub synth_seed: u64,
    /// Target size of the synthetic corpus, in bytes.
    pub synth_bytes: usize,
    /// Vocabulary cap; defaults to the model's embedding table size.
    pub vocab_size: Option<usize>,
    /// Packing length; defaults to the model's position capacity.
    pub seq_len: Option<usize>,
    pub pack_mode: PackMode,
    /// Fraction of sequences held out for evaluation. Zero means the
    /// training set doubles as the validation set.
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            synth_seed: 0,
            synth_bytes: 5_000_000,
            vocab_size: None,
            seq_len: None,
            pack_mode: PackMode::Concat,
            val_frac: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(LabError::config(
                "data.val_frac",
                format!("must lie in [0, 1), got {}", self.val_frac),
            ));
        }
        if self.corpus.is_none() && self.synth_bytes == 0 {
            return Err(LabError::config("data.synth_bytes", "must be positive"));
        }
        if let Some(l) = self.seq_len {
            if l < 2 {
                return Err(LabError::config(
                    "data.seq_len",
                    format!("must be at least 2, got {l}"),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The run file
// ---------------------------------------------------------------------------

/// Everything one experiment needs, in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The single top-level seed; every random stream derives from it.
    pub seed: u64,
    /// Output directory. A `--out` flag wins over this; relative paths are
    /// rooted under `OUTLIER_LAB_OUT` when that variable is set.
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    /// Attention normalizer; when present it replaces `model.softmax`
    /// during [`RunConfig::resolve`].
    pub softmax: Option<SoftmaxConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub quant: QuantScheme,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parse a run file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            LabError::config(path.display().to_string(), e.to_string().trim().to_string())
        })
    }

    /// Stitch the standalone `[softmax]` block into the model, propagate
    /// the top-level seed into the trainer, and validate the result. The
    /// returned config is what a run actually executes, and what gets
    /// written back out as the resolved snapshot.
    pub fn resolve(mut self) -> Result<RunConfig> {
        if let Some(softmax) = self.softmax {
            self.model.softmax = softmax;
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.quant.validate()?;
        self.eval.validate()?;

        if let Some(&l) = self.eval.lengths.iter().find(|&&l| l > self.model.max_seq_len) {
            return Err(LabError::config(
                "eval.lengths",
                format!(
                    "length {l} exceeds the position table capacity {}",
                    self.model.max_seq_len
                ),
            ));
        }
        if let Some(l) = self.data.seq_len {
            if l > self.model.max_seq_len {
                return Err(LabError::config(
                    "data.seq_len",
                    format!(
                        "packing length {l} exceeds the position table capacity {}",
                        self.model.max_seq_len
                    ),
                ));
            }
        }
        if let Some(v) = self.data.vocab_size {
            if v > self.model.vocab_size {
                return Err(LabError::config(
                    "data.vocab_size",
                    format!(
                        "vocabulary cap {v} exceeds the embedding table size {}",
                        self.model.vocab_size
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Serialize as TOML, ready to be written as the snapshot.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| LabError::config("config", format!("cannot serialize: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// The materialized data side of a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub vocab: Vocab,
    pub train: PackedDataset,
    pub val: PackedDataset,
}

/// Build vocabulary and datasets exactly as the config describes them —
/// a pure function of the config, so any command can rebuild the same
/// data from the resolved snapshot.
pub fn build_datasets(cfg: &RunConfig) -> Result<RunData> {
    let text = match &cfg.data.corpus {
        Some(path) => std::fs::read_to_string(path)?,
        None => synth_corpus(cfg.data.synth_seed, cfg.data.synth_bytes),
    };
    let vocab_cap = cfg.data.vocab_size.unwrap_or(cfg.model.vocab_size);
    let vocab = Vocab::build(&text, vocab_cap)?;
    let seq_len = cfg.data.seq_len.unwrap_or(cfg.model.max_seq_len);
    let packed = pack(&text, &vocab, seq_len, cfg.data.pack_mode)?;
    let (train, val) = if cfg.data.val_frac > 0.0 {
        packed.split_validation(cfg.data.val_frac)?
    } else {
        (packed.clone(), packed)
    };
    Ok(RunData { vocab, train, val })
}

// ---------------------------------------------------------------------------
