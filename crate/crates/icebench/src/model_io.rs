//! Persisted reference models.

use std::fs;
use std::path::Path;

use icebench_core::scorer::{ReferenceModel, ReferenceScorer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "icebench-reference-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub accuracy: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub corpus_sha256: String,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub metadata: TrainMetadata,
    pub model: ReferenceModel,
}

pub fn save_model(scorer: &ReferenceScorer, metadata: TrainMetadata, path: &Path) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        metadata,
        model: scorer.clone().into(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("model serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(ReferenceScorer, TrainMetadata)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: format!("bad model file: {e}"),
    })?;
    if file.format != MODEL_FORMAT {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unsupported model format {:?}", file.format),
        });
    }
    Ok((ReferenceScorer::try_from(file.model)?, file.metadata))
}
