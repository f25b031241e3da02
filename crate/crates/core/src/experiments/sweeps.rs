use std::borrow::Cow;

use rayon::prelude::*;

use super::report::{BudgetRow, DetectionRow, DetectorSummary, MetricsReport};
use super::{
    attack_seed, compute_prf, run_attack, ExperimentConfig, DETECTOR_STREAM, EMBED_STREAM,
    SPLIT_STREAM,
};
use crate::datasets::{split_clean_polluted, Corpus, ItemId, Origin, Session};
use crate::detectors::{
    pretrain_generator, train_gan_detector, BaselineDetector, Detector, DetectorConfig, GanDetector,
};
use crate::embeddings::{embed_items, EmbeddingTable};
use crate::error::{Error, Result};
use crate::recommender::Recommender;
use crate::rng;

fn corpus_for<'a>(
    cfg: &ExperimentConfig,
    shared: &'a Option<Corpus>,
    seed: u64,
) -> Result<Cow<'a, Corpus>> {
    Ok(match shared {
        Some(c) => Cow::Borrowed(c),
        None => Cow::Owned(cfg.dataset.load(seed)?),
    })
}

fn shared_corpus(cfg: &ExperimentConfig) -> Result<Option<Corpus>> {
    if cfg.dataset.is_seed_independent() {
        Ok(Some(cfg.dataset.load(0)?))
    } else {
        Ok(None)
    }
}

/// For every seed, attack and budget, injects the attack against the organic
/// corpus, rebuilds the recommender and records the target's hit ratio over
/// the organic users at each `r`. Rows are ordered by seed, attack, budget,
/// then `r`.
pub fn run_budget_sweep(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let shared = shared_corpus(cfg)?;
    let mut report = MetricsReport::new(cfg.clone());
    for &seed in &cfg.seeds {
        let corpus = corpus_for(cfg, &shared, seed)?;
        report
            .budget_rows
            .extend(budget_rows_for_seed(cfg, &corpus, seed)?);
    }
    Ok(report)
}

fn budget_rows_for_seed(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
) -> Result<Vec<BudgetRow>> {
    let target = cfg.target.select(corpus, seed)?;
    let users = corpus.organic_users();
    let max_r = *cfg.r_values.iter().max().expect("validated non-empty");
    let rec = Recommender::from_sessions(&corpus.sessions, corpus.num_users, corpus.num_items())?;
    let pre = rec.recommend_all(&users, max_r);

    let mut points = Vec::new();
    for &kind in &cfg.attacks {
        for (b_idx, &budget) in cfg.budgets.iter().enumerate() {
            for (r_idx, &r) in cfg.r_values.iter().enumerate() {
                points.push((kind, b_idx, budget, r_idx, r));
            }
        }
    }
    points
        .par_iter()
        .map(|&(kind, b_idx, budget, r_idx, r)| {
            let pre_target = pre.hit_ratio(target, r)?;
            let point = (b_idx * cfg.r_values.len() + r_idx) as u64;
            let injected = run_attack(
                kind,
                corpus,
                target,
                budget,
                r,
                cfg,
                attack_seed(seed, kind, point),
            )
            .map_err(|e| {
                Error::invalid(format!(
                    "{kind} attack, budget {budget}, r {r}, seed {seed}: {e}"
                ))
            })?;
            let post_target = if injected.is_empty() {
                pre_target
            } else {
                let attacked = corpus.with_injected(&injected)?;
                Recommender::from_sessions(
                    &attacked.sessions,
                    attacked.num_users,
                    attacked.num_items(),
                )?
                .recommend_all(&users, r)
                .hit_ratio(target, r)?
            };
            Ok(BudgetRow {
                attack: kind,
                budget,
                r,
                seed,
                target,
                injected_sessions: injected.len(),
                pre_best_hit_ratio: pre.best_hit_ratio(r)?,
                pre_target_hit_ratio: pre_target,
                post_target_hit_ratio: post_target,
            })
        })
        .collect()
}

/// Both detectors for one seed, trained on the clean partition.
pub struct TrainedDetectors {
    pub embeddings: EmbeddingTable,
    pub baseline: BaselineDetector,
    pub gan: GanDetector,
    pub clean_sessions: usize,
    pub holdout: Vec<Vec<ItemId>>,
    pub generator_cv_nll: f64,
    pub embedding_checksum_unchanged: bool,
}

/// Splits users, embeds items and trains the baseline and GAN detectors on
/// the clean partition of `corpus`. Returns the partitioned corpus too.
pub fn train_detectors(
    corpus: &Corpus,
    clean_fraction: f64,
    embedding_dim: usize,
    detector: &DetectorConfig,
    seed: u64,
) -> Result<(Corpus, TrainedDetectors)> {
    let split = split_clean_polluted(corpus, clean_fraction, rng::derive_seed(seed, SPLIT_STREAM))?;
    let clean = split.clean_sessions()?;
    let emb = embed_items(
        &split.items,
        embedding_dim,
        rng::derive_seed(seed, EMBED_STREAM),
    )?;
    let checksum_before = emb.checksum().to_string();
    let det_seed = rng::derive_seed(seed, DETECTOR_STREAM);
    let pre = pretrain_generator(&clean, &emb, detector, det_seed)?;
    let baseline = BaselineDetector::from_pretrained(&pre, &emb, detector)?;
    let gan = train_gan_detector(&pre, &emb, detector, det_seed)?;
    let unchanged = emb.verify_checksum() && emb.checksum() == checksum_before;
    let trained = TrainedDetectors {
        baseline,
        gan,
        clean_sessions: clean.len(),
        holdout: pre.holdout.sequences().to_vec(),
        generator_cv_nll: pre.cv_nll().unwrap_or(f64::NAN),
        embedding_checksum_unchanged: unchanged,
        embeddings: emb,
    };
    Ok((split, trained))
}

fn flag_rate<D: Detector>(
    det: &D,
    emb: &EmbeddingTable,
    sessions: &[&Session],
) -> Result<(Vec<bool>, f64)> {
    let flags: Vec<bool> = det
        .classify_all(emb, sessions)?
        .into_iter()
        .map(|r| r.flagged)
        .collect();
    let rate = flags.iter().filter(|&&f| f).count() as f64 / flags.len().max(1) as f64;
    Ok((flags, rate))
}

/// For every seed: split the corpus, train both detectors on the clean
/// partition, then for each attack and injected fraction inject into the
/// polluted partition and score every polluted-partition session. The
/// fraction is taken against the organic session count and rounded to whole
/// malicious users.
pub fn run_detection_sweep(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let shared = shared_corpus(cfg)?;
    let mut report = MetricsReport::new(cfg.clone());
    for &seed in &cfg.seeds {
        let corpus = corpus_for(cfg, &shared, seed)?;
        let (rows, summary) = detection_for_seed(cfg, &corpus, seed)?;
        report.detection_rows.extend(rows);
        report.detector_summaries.push(summary);
    }
    Ok(report)
}

pub fn detection_for_seed(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
) -> Result<(Vec<DetectionRow>, DetectorSummary)> {
    let (split, trained) = train_detectors(
        corpus,
        cfg.clean_fraction,
        cfg.embedding_dim,
        &cfg.detector,
        seed,
    )?;
    let emb = &trained.embeddings;
    let target = cfg.target.select(&split, seed)?;

    let organic: Vec<&Session> = split.polluted_sessions().collect();
    let holdout: Vec<Session> = trained
        .holdout
        .iter()
        .map(|s| Session::organic(0, s.clone()))
        .collect();
    let holdout: Vec<&Session> = holdout.iter().collect();
    let (base_org, base_org_rate) = flag_rate(&trained.baseline, emb, &organic)?;
    let (gan_org, gan_org_rate) = flag_rate(&trained.gan, emb, &organic)?;
    let (_, base_hold_rate) = flag_rate(&trained.baseline, emb, &holdout)?;
    let (_, gan_hold_rate) = flag_rate(&trained.gan, emb, &holdout)?;

    let n_organic = split.num_organic_sessions();
    let mut rows = Vec::new();
    for &kind in &cfg.attacks {
        for (f_idx, &fraction) in cfg.detection_fractions.iter().enumerate() {
            let users =
                (fraction * n_organic as f64 / cfg.sessions_per_user as f64).round() as usize;
            let injected = run_attack(
                kind,
                &split,
                target,
                users,
                cfg.detection_r,
                cfg,
                attack_seed(seed, kind, f_idx as u64),
            )
            .map_err(|e| {
                Error::invalid(format!(
                    "{kind} attack, fraction {fraction}, seed {seed}: {e}"
                ))
            })?;
            let attacked = split.with_injected(&injected)?;
            let polluted: Vec<&Session> = attacked.polluted_sessions().collect();
            debug_assert_eq!(polluted.len(), organic.len() + injected.len());
            let truth: Vec<bool> = polluted
                .iter()
                .map(|s| s.origin == Origin::Injected)
                .collect();
            let injected_refs: Vec<&Session> = injected.iter().collect();
            for (name, org_flags, inj_flags) in [
                (
                    "baseline",
                    &base_org,
                    flag_rate(&trained.baseline, emb, &injected_refs)?.0,
                ),
                (
                    "gan",
                    &gan_org,
                    flag_rate(&trained.gan, emb, &injected_refs)?.0,
                ),
            ] {
                let flags: Vec<bool> = org_flags.iter().chain(&inj_flags).copied().collect();
                let mut row = DetectionRow {
                    attack: kind,
                    fraction,
                    injected_fraction: injected.len() as f64 / n_organic as f64,
                    seed,
                    detector: name.into(),
                    polluted_sessions: polluted.len(),
                    injected_sessions: injected.len(),
                    true_positives: 0,
                    false_positives: 0,
                    false_negatives: 0,
                    precision: None,
                    recall: None,
                    f1: None,
                };
                row.set_prf(compute_prf(&truth, &flags)?);
                rows.push(row);
            }
        }
    }

    let summary = DetectorSummary {
        seed,
        target,
        clean_sessions: trained.clean_sessions,
        holdout_sessions: trained.holdout.len(),
        generator_cv_nll: trained.generator_cv_nll,
        baseline_threshold: trained.baseline.nll_threshold,
        gan_threshold: trained.gan.score_threshold,
        baseline_holdout_flag_rate: base_hold_rate,
        gan_holdout_flag_rate: gan_hold_rate,
        baseline_organic_flag_rate: base_org_rate,
        gan_organic_flag_rate: gan_org_rate,
        disc_pretrain_accuracy: trained.gan.log.disc_pretrain_accuracy,
        embedding_checksum: emb.checksum().to_string(),
        embedding_checksum_unchanged: trained.embedding_checksum_unchanged,
    };
    Ok((rows, summary))
}

/// Mean of `f` over the rows selected by `keep`, skipping undefined values.
pub fn mean_where<T>(
    rows: &[T],
    keep: impl Fn(&T) -> bool,
    f: impl Fn(&T) -> Option<f64>,
) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| keep(r)).filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
