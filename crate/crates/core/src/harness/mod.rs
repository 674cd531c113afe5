//! Training loops, configuration, checkpoints, evaluation plumbing and the
//! synthetic corpora used by the acceptance suite.

mod checkpoint;
mod config;
mod eval;
mod optim;
pub mod synthetic;
mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointHeader, Dtype, TensorEntry, FORMAT_VERSION};
pub use config::TrainConfig;
pub use eval::{evaluate, evaluate_baseline, EvalReport};
pub use optim::{clip_grad_norm, Adam};
pub use train::{finetune, lm_documents, pretrain_lm, training_vocab, EpochRecord, TrainOutcome};

use crate::error::Result;

/// Everything needed to rerun an experiment from the same corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    /// Corpus path to hex SHA-256 of its bytes.
    pub corpus_hashes: BTreeMap<String, String>,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub final_report: Option<EvalReport>,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            corpus_hashes: BTreeMap::new(),
            checkpoint: None,
            init_checkpoint: None,
            epochs: Vec::new(),
            best_epoch: None,
            final_report: None,
        }
    }

    pub fn record_corpus(&mut self, path: &Path) -> Result<()> {
        self.corpus_hashes
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
