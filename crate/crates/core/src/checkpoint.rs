//! Versioned JSON checkpoints.
//!
//! A checkpoint always holds the model configuration and every parameter
//! array by name (row-major). Checkpoints written during training also carry
//! the optimiser state, epoch counter and history so a run can be resumed
//! and continue exactly as if it had never stopped.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{ModelConfig, PredictorParams, ARRAY_NAMES};
use crate::training::{AdamState, History, TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT: &str = "prosody-mdn-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

type Arrays = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSection {
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    adam_first: Arrays,
    adam_second: Arrays,
    history: History,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    format_version: u32,
    config: ModelConfig,
    arrays: Arrays,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingSection>,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(PredictorParams),
    Training(Box<TrainState>),
}

impl Checkpoint {
    pub fn params(&self) -> &PredictorParams {
        match self {
            Checkpoint::Model(p) => p,
            Checkpoint::Training(s) => &s.params,
        }
    }

    pub fn into_params(self) -> PredictorParams {
        match self {
            Checkpoint::Model(p) => p,
            Checkpoint::Training(s) => s.params,
        }
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let doc = match self {
            Checkpoint::Model(p) => Document {
                format: CHECKPOINT_FORMAT.into(),
                format_version: CHECKPOINT_FORMAT_VERSION,
                config: p.config.clone(),
                arrays: to_arrays(p)?,
                training: None,
            },
            Checkpoint::Training(s) => Document {
                format: CHECKPOINT_FORMAT.into(),
                format_version: CHECKPOINT_FORMAT_VERSION,
                config: s.params.config.clone(),
                arrays: to_arrays(&s.params)?,
                training: Some(TrainingSection {
                    config: s.config.clone(),
                    epoch: s.epoch,
                    adam_step: s.adam.step,
                    adam_first: to_arrays(&s.adam.first)?,
                    adam_second: to_arrays(&s.adam.second)?,
                    history: s.history.clone(),
                }),
            },
        };
        let mut bytes = serde_json::to_vec(&doc).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let doc: Document = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unexpected format tag {:?}", doc.format),
            });
        }
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unsupported format version {}", doc.format_version),
            });
        }
        doc.config.validate()?;
        let params = from_arrays(&doc.config, doc.arrays)?;
        params.check_finite()?;
        Ok(match doc.training {
            None => Checkpoint::Model(params),
            Some(t) => {
                let adam = AdamState {
                    first: from_arrays(&doc.config, t.adam_first)?,
                    second: from_arrays(&doc.config, t.adam_second)?,
                    step: t.adam_step,
                };
                Checkpoint::Training(Box::new(TrainState {
                    config: t.config,
                    params,
                    adam,
                    epoch: t.epoch,
                    history: t.history,
                }))
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_json_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_slice(&bytes)
    }
}

fn to_arrays(p: &PredictorParams) -> Result<Arrays> {
    if let Err(e) = p.check_finite() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("cannot store non-finite parameters: {e}"),
        });
    }
    Ok(p.arrays()
        .into_iter()
        .map(|(name, a)| (name.to_string(), a.clone()))
        .collect())
}

fn from_arrays(config: &ModelConfig, mut arrays: Arrays) -> Result<PredictorParams> {
    let mut params = PredictorParams::zeros(config);
    for (name, slot) in params.arrays_mut() {
        let values = arrays.remove(name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing array {name}"),
        })?;
        if values.len() != slot.len() {
            return Err(Error::shape(format!(
                "array {name} has {} entries, config implies {}",
                values.len(),
                slot.len()
            )));
        }
        *slot = values;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("unknown array {extra} (expected {})", ARRAY_NAMES.join(", ")),
        });
    }
    Ok(params)
}
