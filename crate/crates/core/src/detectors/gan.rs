//! Sequential GAN detector: an LSTM generator trained by policy gradient with
//! Monte Carlo rollout rewards against an LSTM discriminator.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::discriminator::{discriminator_backward, discriminator_score, DiscriminatorParams};
use super::{
    check_enough, percentile, train_language_model, DetectionResult, Detector, DetectorConfig,
    MleEpoch,
};
use crate::datasets::{CleanSessions, ItemId};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::neuralnet::cell::CellDims;
use crate::neuralnet::{
    adam_update, backward, clip_grad_norm, continue_sampling, prefix_state, sample_with, AdamState,
    LstmCheckpoint, LstmParams, TokenWeights,
};
use crate::rng::{self, Rng};

// seed streams
const HOLDOUT: u64 = 1;
const MLE: u64 = 2;
const DISC_INIT: u64 = 3;
const DISC_PRETRAIN: u64 = 4;
const ADVERSARIAL: u64 = 5;

/// Language model after maximum-likelihood pretraining, with the split it
/// was trained and validated on.
#[derive(Clone, Debug)]
pub struct PretrainedGenerator {
    pub params: LstmParams,
    pub log: Vec<MleEpoch>,
    pub train: CleanSessions,
    pub holdout: CleanSessions,
}

impl PretrainedGenerator {
    /// Mean per-token NLL on the held-out split of the kept epoch.
    pub fn cv_nll(&self) -> Option<f64> {
        self.log.iter().map(|e| e.cv_nll).min_by(f64::total_cmp)
    }
}

/// Maximum-likelihood pretraining on a seeded train/holdout split of `clean`.
pub fn pretrain_generator(
    clean: &CleanSessions,
    emb: &EmbeddingTable,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<PretrainedGenerator> {
    cfg.validate()?;
    check_enough(clean, cfg)?;
    let (train, holdout) =
        clean.split_holdout(cfg.holdout_fraction, rng::derive_seed(seed, HOLDOUT))?;
    let (params, log) =
        train_language_model(&train, &holdout, emb, cfg, rng::derive_seed(seed, MLE))?;
    Ok(PretrainedGenerator {
        params,
        log,
        train,
        holdout,
    })
}

fn length_sampler(clean: &CleanSessions) -> Result<(Vec<usize>, WeightedIndex<usize>)> {
    let hist = clean.length_histogram();
    let lens: Vec<usize> = hist.iter().map(|&(l, _)| l).collect();
    let weights = WeightedIndex::new(hist.iter().map(|&(_, c)| c))
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok((lens, weights))
}

/// `n` generator samples with lengths drawn from the clean length histogram.
/// Sample `i` depends only on `(seed, i)`.
fn generate(
    generator: &LstmParams,
    emb: &EmbeddingTable,
    lengths: &(Vec<usize>, WeightedIndex<usize>),
    n: usize,
    seed: u64,
) -> Vec<Vec<ItemId>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::child(seed, i as u64);
            let len = lengths.0[lengths.1.sample(&mut rng)];
            sample_with(generator, emb, len, &mut rng)
        })
        .collect()
}

fn mean_score(
    disc: &DiscriminatorParams,
    emb: &EmbeddingTable,
    seqs: &[Vec<ItemId>],
) -> Result<f64> {
    let scores = seqs
        .par_iter()
        .map(|s| discriminator_score(disc, emb, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// One pass of minibatch BCE training. Returns the mean batch loss.
fn fit_discriminator(
    disc: &mut DiscriminatorParams,
    adam: &mut AdamState,
    emb: &EmbeddingTable,
    examples: &[(&[ItemId], f64)],
    cfg: &DetectorConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let seqs: Vec<&[ItemId]> = chunk.iter().map(|&i| examples[i].0).collect();
        let labels: Vec<f64> = chunk.iter().map(|&i| examples[i].1).collect();
        let mut g = discriminator_backward(disc, emb, &seqs, &labels)?;
        clip_grad_norm(&mut g.grads, cfg.grad_clip);
        adam_update(disc.values_mut(), &g.grads, adam)?;
        total += g.loss;
        batches += 1;
    }
    if !disc.is_finite() {
        return Err(Error::NonFinite("discriminator training".into()));
    }
    Ok(total / batches.max(1) as f64)
}

fn accuracy(
    disc: &DiscriminatorParams,
    emb: &EmbeddingTable,
    examples: &[(&[ItemId], f64)],
) -> Result<f64> {
    let correct = examples
        .par_iter()
        .map(|(s, y)| Ok(((discriminator_score(disc, emb, s)? >= 0.5) == (*y >= 0.5)) as usize))
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / examples.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct DiscriminatorPretrain {
    pub params: DiscriminatorParams,
    pub adam: AdamState,
    pub epoch_losses: Vec<f64>,
    /// Accuracy on held-out clean sessions plus as many fresh samples.
    pub held_out_accuracy: f64,
}

/// BCE pretraining with clean sessions as positives and an equal number of
/// generator samples as negatives. A seeded `holdout_fraction` of `clean`
/// (and as many fresh samples) is kept aside to report accuracy.
pub fn pretrain_discriminator(
    clean: &CleanSessions,
    generator: &LstmParams,
    emb: &EmbeddingTable,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<DiscriminatorPretrain> {
    pretrain_discriminator_labeled(clean, generator, emb, cfg, seed, 1.0)
}

pub(crate) fn pretrain_discriminator_labeled(
    clean: &CleanSessions,
    generator: &LstmParams,
    emb: &EmbeddingTable,
    cfg: &DetectorConfig,
    seed: u64,
    real_label: f64,
) -> Result<DiscriminatorPretrain> {
    cfg.validate()?;
    generator.check_embeddings(emb)?;
    if clean.len() < 2 {
        return Err(Error::TooFewSessions {
            needed: 2,
            found: clean.len(),
        });
    }
    let (train, holdout) =
        clean.split_holdout(cfg.holdout_fraction, rng::derive_seed(seed, HOLDOUT))?;
    let lengths = length_sampler(&train)?;
    let dims = CellDims {
        input: emb.dim(),
        hidden: cfg.hidden_dim,
    };
    let mut disc = DiscriminatorParams::init(dims, rng::derive_seed(seed, DISC_INIT))?;
    let mut adam = AdamState::new(disc.values().len(), cfg.disc_learning_rate);
    let fake_label = 1.0 - real_label;
    let mut epoch_losses = Vec::with_capacity(cfg.disc_pretrain_epochs);
    for epoch in 0..cfg.disc_pretrain_epochs {
        let stream = rng::derive_seed(seed, 100 + epoch as u64);
        let negatives = generate(
            generator,
            emb,
            &lengths,
            train.len(),
            rng::derive_seed(stream, 0),
        );
        let examples: Vec<(&[ItemId], f64)> = train
            .sequences()
            .iter()
            .map(|s| (s.as_slice(), real_label))
            .chain(negatives.iter().map(|s| (s.as_slice(), fake_label)))
            .collect();
        let loss = fit_discriminator(
            &mut disc,
            &mut adam,
            emb,
            &examples,
            cfg,
            &mut rng::child(stream, 1),
        )?;
        epoch_losses.push(loss);
    }
    let negatives = generate(
        generator,
        emb,
        &lengths,
        holdout.len(),
        rng::derive_seed(seed, DISC_PRETRAIN),
    );
    let eval: Vec<(&[ItemId], f64)> = holdout
        .sequences()
        .iter()
        .map(|s| (s.as_slice(), 1.0))
        .chain(negatives.iter().map(|s| (s.as_slice(), 0.0)))
        .collect();
    let held_out_accuracy = accuracy(&disc, emb, &eval)?;
    Ok(DiscriminatorPretrain {
        params: disc,
        adam,
        epoch_losses,
        held_out_accuracy,
    })
}

/// Per-position rewards for `seq` under an arbitrary scorer. Position `l`
/// (0-based, not last) gets the mean score of `num_rollouts` generator
/// completions of `seq[..=l]`; the last position gets the score of `seq`.
pub fn rollout_reward_with<F>(
    generator: &LstmParams,
    emb: &EmbeddingTable,
    seq: &[ItemId],
    num_rollouts: usize,
    seed: u64,
    score: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[ItemId]) -> Result<f64> + Sync,
{
    if num_rollouts == 0 {
        return Err(Error::invalid("num_rollouts must be at least 1"));
    }
    if seq.is_empty() {
        return Err(Error::invalid("cannot reward an empty sequence"));
    }
    generator.check_embeddings(emb)?;
    let k = seq.len();
    let mut rewards: Vec<f64> = (0..k - 1)
        .into_par_iter()
        .map(|l| {
            let state = prefix_state(generator, emb, &seq[..=l]);
            let mut total = 0.0;
            for r in 0..num_rollouts {
                let mut rng = rng::child(seed, (l * num_rollouts + r) as u64);
                let tail = continue_sampling(generator, emb, &state, k - l - 1, &mut rng);
                let mut full = seq[..=l].to_vec();
                full.extend_from_slice(&tail);
                total += score(&full)?;
            }
            Ok(total / num_rollouts as f64)
        })
        .collect::<Result<_>>()?;
    rewards.push(score(seq)?);
    Ok(rewards)
}

pub fn rollout_reward(
    generator: &LstmParams,
    discriminator: &DiscriminatorParams,
    emb: &EmbeddingTable,
    seq: &[ItemId],
    num_rollouts: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    rollout_reward_with(generator, emb, seq, num_rollouts, seed, |s| {
        discriminator_score(discriminator, emb, s)
    })
}

/// Threshold at the `pct`-th percentile of discriminator scores on clean
/// held-out sessions.
pub fn calibrate_threshold(
    discriminator: &DiscriminatorParams,
    emb: &EmbeddingTable,
    clean_cv: &CleanSessions,
    pct: f64,
) -> Result<f64> {
    let scores = clean_cv
        .sequences()
        .par_iter()
        .map(|s| discriminator_score(discriminator, emb, s))
        .collect::<Result<Vec<f64>>>()?;
    percentile(&scores, pct)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialEpoch {
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    /// Mean discriminator score of a generator batch before the generator
    /// updates of this epoch.
    pub score_before: f64,
    /// Same batch seeds, after the generator updates.
    pub score_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLog {
    pub pretrain: Vec<MleEpoch>,
    pub disc_pretrain_losses: Vec<f64>,
    pub disc_pretrain_accuracy: f64,
    pub adversarial: Vec<AdversarialEpoch>,
}

#[derive(Clone, Debug)]
pub struct GanDetector {
    pub generator: LstmParams,
    pub discriminator: DiscriminatorParams,
    pub score_threshold: f64,
    pub embedding_checksum: String,
    pub log: GanLog,
}

impl Detector for GanDetector {
    fn score(&self, emb: &EmbeddingTable, items: &[ItemId]) -> Result<f64> {
        discriminator_score(&self.discriminator, emb, items)
    }

    fn is_flagged(&self, score: f64) -> bool {
        score < self.score_threshold
    }

    fn embedding_checksum(&self) -> &str {
        &self.embedding_checksum
    }
}

/// Alternates `g_steps` policy-gradient generator updates (per-token rewards
/// from rollouts) with `d_steps` discriminator passes on fresh samples, for
/// `adversarial_epochs` epochs. The threshold is calibrated on `clean_cv`.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    generator: LstmParams,
    discriminator: DiscriminatorPretrain,
    clean: &CleanSessions,
    clean_cv: &CleanSessions,
    emb: &EmbeddingTable,
    cfg: &DetectorConfig,
    seed: u64,
    pretrain_log: Vec<MleEpoch>,
) -> Result<GanDetector> {
    cfg.validate()?;
    generator.check_embeddings(emb)?;
    let checksum_before = emb.checksum().to_string();
    let lengths = length_sampler(clean)?;
    let mut generator = generator;
    let mut g_adam = AdamState::new(generator.values().len(), cfg.pg_learning_rate);
    let DiscriminatorPretrain {
        params: mut disc,
        adam: mut d_adam,
        epoch_losses: disc_pretrain_losses,
        held_out_accuracy: disc_pretrain_accuracy,
    } = discriminator;
    let mut log = Vec::with_capacity(cfg.adversarial_epochs);
    for epoch in 0..cfg.adversarial_epochs {
        let stream = rng::derive_seed(rng::derive_seed(seed, ADVERSARIAL), epoch as u64);
        let mut g_loss = 0.0;
        let (mut score_before, mut score_after) = (0.0, 0.0);
        for g in 0..cfg.g_steps {
            let batch_seed = rng::derive_seed(stream, 2 * g as u64);
            let batch = generate(&generator, emb, &lengths, cfg.pg_batch_size, batch_seed);
            let before = mean_score(&disc, emb, &batch)?;
            let reward_seed = rng::derive_seed(stream, 2 * g as u64 + 1);
            let rewards = batch
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    rollout_reward(
                        &generator,
                        &disc,
                        emb,
                        s,
                        cfg.num_rollouts,
                        rng::derive_seed(reward_seed, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = backward(&generator, emb, &batch, TokenWeights::PerToken(&rewards))?;
            clip_grad_norm(&mut grads.grads, cfg.grad_clip);
            adam_update(generator.values_mut(), &grads.grads, &mut g_adam)?;
            if !generator.is_finite() {
                return Err(Error::NonFinite(format!(
                    "generator update, adversarial epoch {epoch}; log so far: {log:?}"
                )));
            }
            let after = mean_score(
                &disc,
                emb,
                &generate(&generator, emb, &lengths, cfg.pg_batch_size, batch_seed),
            )?;
            g_loss += grads.loss;
            if g == 0 {
                score_before = before;
            }
            score_after = after;
        }
        let mut d_loss = 0.0;
        for d in 0..cfg.d_steps {
            let d_stream = rng::derive_seed(stream, 1000 + d as u64);
            let negatives = generate(
                &generator,
                emb,
                &lengths,
                cfg.disc_samples,
                rng::derive_seed(d_stream, 0),
            );
            let mut rng = rng::child(d_stream, 1);
            let examples: Vec<(&[ItemId], f64)> = (0..cfg.disc_samples)
                .map(|_| {
                    (
                        clean.sequences()[rng.gen_range(0..clean.len())].as_slice(),
                        1.0,
                    )
                })
                .chain(negatives.iter().map(|s| (s.as_slice(), 0.0)))
                .collect();
            d_loss += fit_discriminator(&mut disc, &mut d_adam, emb, &examples, cfg, &mut rng)
                .map_err(|e| {
                    Error::NonFinite(format!(
                        "{e}, adversarial epoch {epoch}; log so far: {log:?}"
                    ))
                })?;
        }
        log.push(AdversarialEpoch {
            epoch,
            g_loss: g_loss / cfg.g_steps.max(1) as f64,
            d_loss: d_loss / cfg.d_steps.max(1) as f64,
            score_before,
            score_after,
        });
    }
    debug_assert_eq!(emb.checksum(), checksum_before);
    let score_threshold = calibrate_threshold(&disc, emb, clean_cv, cfg.score_percentile)?;
    Ok(GanDetector {
        generator,
        discriminator: disc,
        score_threshold,
        embedding_checksum: emb.checksum().to_string(),
        log: GanLog {
            pretrain: pretrain_log,
            disc_pretrain_losses,
            disc_pretrain_accuracy,
            adversarial: log,
        },
    })
}

/// Discriminator pretraining, adversarial training and calibration on top of
/// an already pretrained generator.
pub fn train_gan_detector(
    pre: &PretrainedGenerator,
    emb: &EmbeddingTable,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<GanDetector> {
    let disc = pretrain_discriminator(
        &pre.train,
        &pre.params,
        emb,
        cfg,
        rng::derive_seed(seed, DISC_PRETRAIN),
    )?;
    adversarial_train(
        pre.params.clone(),
        disc,
        &pre.train,
        &pre.holdout,
        emb,
        cfg,
        rng::derive_seed(seed, ADVERSARIAL),
        pre.log.clone(),
    )
}

pub fn gan_classify(
    detector: &GanDetector,
    emb: &EmbeddingTable,
    items: &[ItemId],
) -> Result<DetectionResult> {
    detector.classify(emb, items)
}

pub const GAN_CHECKPOINT_FORMAT: &str = "sessionguard-gan-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanCheckpoint {
    pub format: String,
    pub generator: LstmCheckpoint,
    pub discriminator: DiscriminatorParams,
    pub score_threshold: f64,
    pub log: GanLog,
}

impl GanCheckpoint {
    pub fn new(det: &GanDetector) -> Self {
        GanCheckpoint {
            format: GAN_CHECKPOINT_FORMAT.into(),
            generator: LstmCheckpoint::new(&det.generator, &det.embedding_checksum),
            discriminator: det.discriminator.clone(),
            score_threshold: det.score_threshold,
            log: det.log.clone(),
        }
    }

    pub fn into_detector(self) -> Result<GanDetector> {
        if self.format != GAN_CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if !self.score_threshold.is_finite() {
            return Err(Error::NonFinite("score threshold".into()));
        }
        let generator = self.generator.to_params()?;
        let discriminator = DiscriminatorParams::from_values(
            self.discriminator.dims(),
            self.discriminator.values().to_vec(),
        )?;
        if discriminator.dims().input != generator.dims().input_dim {
            return Err(Error::Shape(
                "generator and discriminator input dims differ".into(),
            ));
        }
        Ok(GanDetector {
            generator,
            discriminator,
            score_threshold: self.score_threshold,
            embedding_checksum: self.generator.embedding_checksum,
            log: self.log,
        })
    }

    pub fn from_json_str(text: &str, source_name: &str) -> Result<GanDetector> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            source_name: source_name.into(),
            source: e,
        })?;
        ck.into_detector()
    }

    pub fn write_json(det: &GanDetector, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Self::new(det)).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<GanDetector> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }
}
