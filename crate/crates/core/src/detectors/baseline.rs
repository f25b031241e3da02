use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gan::{pretrain_generator, PretrainedGenerator};
use super::{percentile, DetectionResult, Detector, DetectorConfig, MleEpoch};
use crate::datasets::{CleanSessions, ItemId};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::neuralnet::{sequence_nll, LstmCheckpoint, LstmParams};

/// Language model plus an NLL cutoff; flags sessions with NLL above it.
#[derive(Clone, Debug)]
pub struct BaselineDetector {
    pub model: LstmParams,
    pub nll_threshold: f64,
    pub embedding_checksum: String,
    pub log: Vec<MleEpoch>,
}

impl BaselineDetector {
    /// Thresholds an already trained language model at `cfg.nll_percentile`
    /// of its held-out per-token NLLs.
    pub fn from_pretrained(
        pre: &PretrainedGenerator,
        emb: &EmbeddingTable,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        let scores = pre
            .holdout
            .sequences()
            .par_iter()
            .map(|s| sequence_nll(&pre.params, emb, s))
            .collect::<Result<Vec<f64>>>()?;
        Ok(BaselineDetector {
            model: pre.params.clone(),
            nll_threshold: percentile(&scores, cfg.nll_percentile)?,
            embedding_checksum: emb.checksum().to_string(),
            log: pre.log.clone(),
        })
    }
}

impl Detector for BaselineDetector {
    fn score(&self, emb: &EmbeddingTable, items: &[ItemId]) -> Result<f64> {
        sequence_nll(&self.model, emb, items)
    }

    fn is_flagged(&self, score: f64) -> bool {
        score > self.nll_threshold
    }

    fn embedding_checksum(&self) -> &str {
        &self.embedding_checksum
    }
}

/// Maximum-likelihood language model on clean sessions, thresholded at the
/// configured percentile of NLL on a held-out split.
pub fn train_baseline(
    clean: &CleanSessions,
    emb: &EmbeddingTable,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<BaselineDetector> {
    let pre = pretrain_generator(clean, emb, cfg, seed)?;
    BaselineDetector::from_pretrained(&pre, emb, cfg)
}

pub fn baseline_classify(
    detector: &BaselineDetector,
    emb: &EmbeddingTable,
    items: &[ItemId],
) -> Result<DetectionResult> {
    detector.classify(emb, items)
}

pub const BASELINE_CHECKPOINT_FORMAT: &str = "sessionguard-baseline-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineCheckpoint {
    pub format: String,
    pub model: LstmCheckpoint,
    pub nll_threshold: f64,
    pub log: Vec<MleEpoch>,
}

impl BaselineCheckpoint {
    pub fn new(det: &BaselineDetector) -> Self {
        BaselineCheckpoint {
            format: BASELINE_CHECKPOINT_FORMAT.into(),
            model: LstmCheckpoint::new(&det.model, &det.embedding_checksum),
            nll_threshold: det.nll_threshold,
            log: det.log.clone(),
        }
    }

    pub fn into_detector(self) -> Result<BaselineDetector> {
        if self.format != BASELINE_CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if !self.nll_threshold.is_finite() {
            return Err(Error::NonFinite("NLL threshold".into()));
        }
        Ok(BaselineDetector {
            model: self.model.to_params()?,
            nll_threshold: self.nll_threshold,
            embedding_checksum: self.model.embedding_checksum,
            log: self.log,
        })
    }

    pub fn from_json_str(text: &str, source_name: &str) -> Result<BaselineDetector> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            source_name: source_name.into(),
            source: e,
        })?;
        ck.into_detector()
    }

    pub fn write_json(det: &BaselineDetector, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Self::new(det)).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<BaselineDetector> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }
}
