//! Injected-session detectors trained only on the clean partition.
//!
//! [`BaselineDetector`] flags sessions whose per-token NLL under a clean
//! language model exceeds a high percentile of held-out clean NLLs.
//! [`GanDetector`] flags sessions whose adversarially trained discriminator
//! score falls below a low percentile of held-out clean scores.

mod baseline;
mod discriminator;
mod gan;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{CleanSessions, ItemId, Origin, Session};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::neuralnet::{
    adam_update, backward, clip_grad_norm, sequence_nll, AdamState, LstmDims, LstmParams,
    TokenWeights,
};
use crate::rng;

pub use baseline::{baseline_classify, train_baseline, BaselineCheckpoint, BaselineDetector};
pub use discriminator::{discriminator_backward, discriminator_score, DiscriminatorParams};
pub use gan::{
    adversarial_train, calibrate_threshold, gan_classify, pretrain_discriminator,
    pretrain_generator, rollout_reward, rollout_reward_with, train_gan_detector, AdversarialEpoch,
    DiscriminatorPretrain, GanCheckpoint, GanDetector, GanLog, PretrainedGenerator,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub holdout_fraction: f64,
    pub grad_clip: f64,
    /// Baseline flags NLL above this percentile of clean held-out NLLs.
    pub nll_percentile: f64,
    /// GAN detector flags scores below this percentile of clean held-out scores.
    pub score_percentile: f64,
    pub disc_learning_rate: f64,
    pub disc_pretrain_epochs: usize,
    /// Generated negatives per discriminator step.
    pub disc_samples: usize,
    pub num_rollouts: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub adversarial_epochs: usize,
    /// Sequences per policy-gradient step.
    pub pg_batch_size: usize,
    pub pg_learning_rate: f64,
    pub min_sessions: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hidden_dim: 32,
            learning_rate: 0.01,
            batch_size: 32,
            pretrain_epochs: 30,
            holdout_fraction: 0.1,
            grad_clip: 5.0,
            nll_percentile: 99.0,
            score_percentile: 1.0,
            disc_learning_rate: 0.005,
            disc_pretrain_epochs: 10,
            disc_samples: 1024,
            num_rollouts: 8,
            g_steps: 1,
            d_steps: 3,
            adversarial_epochs: 20,
            pg_batch_size: 64,
            pg_learning_rate: 0.001,
            min_sessions: 100,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("disc_samples", self.disc_samples),
            ("num_rollouts", self.num_rollouts),
            ("pg_batch_size", self.pg_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("disc_learning_rate", self.disc_learning_rate),
            ("pg_learning_rate", self.pg_learning_rate),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout_fraction must lie in (0, 1)"));
        }
        for (name, v) in [
            ("nll_percentile", self.nll_percentile),
            ("score_percentile", self.score_percentile),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 100], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Verdict on one session. `origin` is attached only for evaluation and never
/// read by a detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub score: f64,
    pub flagged: bool,
    pub origin: Option<Origin>,
}

/// Anything that scores a session and flags it by a fixed rule.
pub trait Detector: Sync {
    fn score(&self, emb: &EmbeddingTable, items: &[ItemId]) -> Result<f64>;
    fn is_flagged(&self, score: f64) -> bool;
    fn embedding_checksum(&self) -> &str;

    fn classify(&self, emb: &EmbeddingTable, items: &[ItemId]) -> Result<DetectionResult> {
        let score = self.score(emb, items)?;
        Ok(DetectionResult {
            score,
            flagged: self.is_flagged(score),
            origin: None,
        })
    }

    /// Classifies every session, attaching its ground-truth origin.
    fn classify_all(
        &self,
        emb: &EmbeddingTable,
        sessions: &[&Session],
    ) -> Result<Vec<DetectionResult>> {
        if emb.checksum() != self.embedding_checksum() {
            return Err(Error::invalid(
                "embedding table differs from the one the detector was trained on",
            ));
        }
        use rayon::prelude::*;
        sessions
            .par_iter()
            .map(|s| {
                let mut r = self.classify(emb, &s.items)?;
                r.origin = Some(s.origin);
                Ok(r)
            })
            .collect()
    }
}

/// Writes `session_index,score,flagged,origin` rows.
pub fn write_results_csv(results: &[DetectionResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "session_index,score,flagged,origin").map_err(io)?;
    for (idx, r) in results.iter().enumerate() {
        let origin = match r.origin {
            Some(Origin::Organic) => "organic",
            Some(Origin::Injected) => "injected",
            None => "",
        };
        writeln!(w, "{idx},{},{},{origin}", r.score, r.flagged).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Percentile with linear interpolation between order statistics, `p` in
/// `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("percentile input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

fn check_enough(clean: &CleanSessions, cfg: &DetectorConfig) -> Result<()> {
    if clean.len() < cfg.min_sessions {
        return Err(Error::TooFewSessions {
            needed: cfg.min_sessions,
            found: clean.len(),
        });
    }
    Ok(())
}

/// Per-epoch record of maximum-likelihood training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub cv_nll: f64,
}

fn mean_nll(params: &LstmParams, emb: &EmbeddingTable, sessions: &[Vec<ItemId>]) -> Result<f64> {
    use rayon::prelude::*;
    let scores = sessions
        .par_iter()
        .map(|s| sequence_nll(params, emb, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Maximum-likelihood training of a language model on `train`, scoring
/// `holdout` after every epoch. Returns the parameters of the epoch with the
/// lowest held-out NLL.
pub(crate) fn train_language_model(
    train: &CleanSessions,
    holdout: &CleanSessions,
    emb: &EmbeddingTable,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(LstmParams, Vec<MleEpoch>)> {
    let dims = LstmDims {
        input_dim: emb.dim(),
        hidden_dim: cfg.hidden_dim,
        vocab: emb.num_items(),
    };
    let mut params = LstmParams::init(dims, rng::derive_seed(seed, 0))?;
    if let Some(max) = train.max_item() {
        if max as usize >= dims.vocab {
            return Err(Error::invalid(format!("item {max} has no embedding")));
        }
    }
    let mut adam = AdamState::new(dims.param_len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.pretrain_epochs);
    let mut best = (f64::INFINITY, params.clone());
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng::child(seed, 1 + epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[ItemId]> = chunk
                .iter()
                .map(|&i| train.sequences()[i].as_slice())
                .collect();
            let mut g = backward(&params, emb, &batch, TokenWeights::Mle)?;
            clip_grad_norm(&mut g.grads, cfg.grad_clip);
            adam_update(params.values_mut(), &g.grads, &mut adam)?;
            total += g.loss;
            batches += 1;
        }
        let cv_nll = mean_nll(&params, emb, holdout.sequences())?;
        if !cv_nll.is_finite() || !params.is_finite() {
            return Err(Error::NonFinite(format!("language model epoch {epoch}")));
        }
        log.push(MleEpoch {
            epoch,
            train_nll: total / batches.max(1) as f64,
            cv_nll,
        });
        if cv_nll < best.0 {
            best = (cv_nll, params.clone());
        }
    }
    Ok((best.1, log))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert!((percentile(&v, 10.0).unwrap() - 1.4).abs() < 1e-12);
        assert!(percentile(&[], 5.0).is_err());
        assert!(percentile(&v, 101.0).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.nll_percentile, 99.0);
        assert_eq!((c.num_rollouts, c.g_steps, c.d_steps), (8, 1, 3));
        assert_eq!((c.adversarial_epochs, c.pretrain_epochs), (20, 30));
        let bad = DetectorConfig {
            holdout_fraction: 1.0,
            ..DetectorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_fills_defaults() {
        let c: DetectorConfig = serde_json::from_str(r#"{"hidden_dim": 4}"#).unwrap();
        assert_eq!(c.hidden_dim, 4);
        assert_eq!(c.d_steps, 3);
        assert!(serde_json::from_str::<DetectorConfig>(r#"{"hidden": 4}"#).is_err());
    }

    #[test]
    fn results_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = [
            DetectionResult {
                score: 0.5,
                flagged: true,
                origin: Some(Origin::Injected),
            },
            DetectionResult {
                score: 2.0,
                flagged: false,
                origin: None,
            },
        ];
        write_results_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "session_index,score,flagged,origin\n0,0.5,true,injected\n1,2,false,\n"
        );
    }
}
