use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lstm::{LstmDims, LstmParams};
use crate::error::{Error, Result};

pub const LSTM_CHECKPOINT_FORMAT: &str = "sessionguard-lstm-v1";

/// Serialized language model plus the checksum of the embedding table it was
/// trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmCheckpoint {
    pub format: String,
    pub dims: LstmDims,
    pub embedding_checksum: String,
    pub params: Vec<f64>,
}

impl LstmCheckpoint {
    pub fn new(params: &LstmParams, embedding_checksum: &str) -> Self {
        LstmCheckpoint {
            format: LSTM_CHECKPOINT_FORMAT.into(),
            dims: params.dims(),
            embedding_checksum: embedding_checksum.into(),
            params: params.values().to_vec(),
        }
    }

    pub fn to_params(&self) -> Result<LstmParams> {
        if self.format != LSTM_CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        LstmParams::from_values(self.dims, self.params.clone())
    }

    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            source_name: source_name.into(),
            source: e,
        })?;
        ckpt.to_params()?;
        Ok(ckpt)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }
}
