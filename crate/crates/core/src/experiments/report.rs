use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::Prf;
use super::ExperimentConfig;
use crate::attacks::AttackKind;
use crate::datasets::ItemId;
use crate::error::{Error, Result};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

/// Hit ratios for one (attack, budget, r, seed) point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub attack: AttackKind,
    pub budget: usize,
    pub r: usize,
    pub seed: u64,
    pub target: ItemId,
    pub injected_sessions: usize,
    pub pre_best_hit_ratio: f64,
    pub pre_target_hit_ratio: f64,
    pub post_target_hit_ratio: f64,
}

/// One detector's verdicts over the polluted partition for one
/// (attack, fraction, seed) point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub attack: AttackKind,
    /// Requested injected fraction.
    pub fraction: f64,
    /// Injected sessions over organic sessions, as realised.
    pub injected_fraction: f64,
    pub seed: u64,
    pub detector: String,
    pub polluted_sessions: usize,
    pub injected_sessions: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl DetectionRow {
    pub fn set_prf(&mut self, prf: Prf) {
        self.true_positives = prf.true_positives;
        self.false_positives = prf.false_positives;
        self.false_negatives = prf.false_negatives;
        self.precision = prf.precision;
        self.recall = prf.recall;
        self.f1 = prf.f1;
    }
}

/// What each seed's detectors looked like after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub seed: u64,
    pub target: ItemId,
    pub clean_sessions: usize,
    pub holdout_sessions: usize,
    pub generator_cv_nll: f64,
    pub baseline_threshold: f64,
    pub gan_threshold: f64,
    /// Fraction of held-out clean sessions each detector flags.
    pub baseline_holdout_flag_rate: f64,
    pub gan_holdout_flag_rate: f64,
    /// Fraction of organic polluted-partition sessions each detector flags.
    pub baseline_organic_flag_rate: f64,
    pub gan_organic_flag_rate: f64,
    pub disc_pretrain_accuracy: f64,
    pub embedding_checksum: String,
    pub embedding_checksum_unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub budget_rows: Vec<BudgetRow>,
    pub detection_rows: Vec<DetectionRow>,
    pub detector_summaries: Vec<DetectorSummary>,
}

impl MetricsReport {
    pub fn new(config: ExperimentConfig) -> Self {
        MetricsReport {
            code_version: CODE_VERSION.into(),
            config,
            budget_rows: Vec::new(),
            detection_rows: Vec::new(),
            detector_summaries: Vec::new(),
        }
    }

    /// Appends another report's rows. Configs must match.
    pub fn merge(&mut self, other: MetricsReport) -> Result<()> {
        if other.config != self.config || other.code_version != self.code_version {
            return Err(Error::invalid(
                "cannot merge reports from different configs or code versions",
            ));
        }
        self.budget_rows.extend(other.budget_rows);
        self.detection_rows.extend(other.detection_rows);
        self.detector_summaries.extend(other.detector_summaries);
        Ok(())
    }

    /// Checks score ranges and the harmonic-mean identity on every row.
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for row in &self.budget_rows {
            if ![
                row.pre_best_hit_ratio,
                row.pre_target_hit_ratio,
                row.post_target_hit_ratio,
            ]
            .into_iter()
            .all(unit)
            {
                return Err(Error::invalid(format!(
                    "hit ratio outside [0, 1] in {row:?}"
                )));
            }
        }
        for row in &self.detection_rows {
            let p = row;
            if ![p.precision, p.recall, p.f1]
                .into_iter()
                .flatten()
                .all(unit)
            {
                return Err(Error::invalid(format!("score outside [0, 1] in {row:?}")));
            }
            if let (Some(pr), Some(re), Some(f1)) = (p.precision, p.recall, p.f1) {
                let expected = if pr + re > 0.0 {
                    2.0 * pr * re / (pr + re)
                } else {
                    0.0
                };
                if (f1 - expected).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "F1 is not the harmonic mean in {row:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            source_name: source_name.into(),
            source,
        })?;
        report.validate()?;
        Ok(report)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }
}

/// Seed-averaged hit ratios for one (attack, budget, r) point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummaryRow {
    pub attack: AttackKind,
    pub budget: usize,
    pub r: usize,
    pub seeds: usize,
    pub mean_pre_best_hit_ratio: f64,
    pub mean_pre_target_hit_ratio: f64,
    pub mean_post_target_hit_ratio: f64,
}

/// Seed-averaged scores for one (attack, fraction, detector) point. Means
/// skip undefined values and are undefined when every value is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummaryRow {
    pub attack: AttackKind,
    pub fraction: f64,
    pub detector: String,
    pub seeds: usize,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub mean_f1: Option<f64>,
}

fn mean(vals: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in vals {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Groups keyed rows in first-appearance order.
fn group_by<T, K: PartialEq>(rows: &[T], key: impl Fn(&T) -> K) -> Vec<(K, Vec<&T>)> {
    let mut groups: Vec<(K, Vec<&T>)> = Vec::new();
    for row in rows {
        let k = key(row);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, members)) => members.push(row),
            None => groups.push((k, vec![row])),
        }
    }
    groups
}

impl MetricsReport {
    pub fn budget_summary(&self) -> Vec<BudgetSummaryRow> {
        group_by(&self.budget_rows, |r| (r.attack, r.budget, r.r))
            .into_iter()
            .map(|((attack, budget, r), rows)| BudgetSummaryRow {
                attack,
                budget,
                r,
                seeds: rows.len(),
                mean_pre_best_hit_ratio: mean(rows.iter().map(|x| x.pre_best_hit_ratio))
                    .unwrap_or(0.0),
                mean_pre_target_hit_ratio: mean(rows.iter().map(|x| x.pre_target_hit_ratio))
                    .unwrap_or(0.0),
                mean_post_target_hit_ratio: mean(rows.iter().map(|x| x.post_target_hit_ratio))
                    .unwrap_or(0.0),
            })
            .collect()
    }

    pub fn detection_summary(&self) -> Vec<DetectionSummaryRow> {
        group_by(&self.detection_rows, |r| {
            (r.attack, r.fraction.to_bits(), r.detector.clone())
        })
        .into_iter()
        .map(|((attack, fraction, detector), rows)| DetectionSummaryRow {
            attack,
            fraction: f64::from_bits(fraction),
            detector,
            seeds: rows.len(),
            mean_precision: mean(rows.iter().filter_map(|x| x.precision)),
            mean_recall: mean(rows.iter().filter_map(|x| x.recall)),
            mean_f1: mean(rows.iter().filter_map(|x| x.f1)),
        })
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const BUDGET_CSV: &str = "budget_sweep.csv";
pub const DETECTION_CSV: &str = "detection_sweep.csv";
pub const DETECTORS_CSV: &str = "detectors.csv";
pub const BUDGET_SUMMARY_CSV: &str = "budget_summary.csv";
pub const DETECTION_SUMMARY_CSV: &str = "detection_summary.csv";
pub const REPORT_JSON: &str = "report.json";

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the requested formats into `dir` and returns the paths written.
/// CSV files are only written for row kinds the report contains. Undefined
/// scores are empty CSV fields and JSON nulls.
pub fn emit_report(
    report: &MetricsReport,
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    report.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        if !report.budget_rows.is_empty() {
            let path = dir.join(BUDGET_CSV);
            write_csv(&report.budget_rows, &path)?;
            written.push(path);
            let path = dir.join(BUDGET_SUMMARY_CSV);
            write_csv(&report.budget_summary(), &path)?;
            written.push(path);
        }
        if !report.detection_rows.is_empty() {
            let path = dir.join(DETECTION_CSV);
            write_csv(&report.detection_rows, &path)?;
            written.push(path);
            let path = dir.join(DETECTION_SUMMARY_CSV);
            write_csv(&report.detection_summary(), &path)?;
            written.push(path);
        }
        if !report.detector_summaries.is_empty() {
            let path = dir.join(DETECTORS_CSV);
            write_csv(&report.detector_summaries, &path)?;
            written.push(path);
        }
    }
    if formats.contains(&ReportFormat::Json) {
        let path = dir.join(REPORT_JSON);
        fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
