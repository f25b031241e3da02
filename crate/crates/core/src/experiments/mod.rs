//! End-to-end sweeps: hit ratio against attacker budget, and detector
//! precision, recall and F1 against the injected-session fraction.

mod metrics;
mod report;
mod sweeps;

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    gray_box_attack, random_attack, white_box_attack, AttackBudget, AttackKind, AttackParams,
    GrayBoxParams, DEFAULT_VISIBILITY_PCT, DEFAULT_WARMUP_RATIO,
};
use crate::datasets::{
    generate_synthetic, ingest_instacart, Corpus, ItemId, Session, SyntheticConfig,
};
use crate::detectors::DetectorConfig;
use crate::error::{Error, Result};
use crate::rng;

pub use metrics::{compute_prf, spearman, Prf};
pub use report::{
    emit_report, BudgetRow, BudgetSummaryRow, DetectionRow, DetectionSummaryRow, DetectorSummary,
    MetricsReport, ReportFormat, CODE_VERSION,
};
pub use sweeps::{
    detection_for_seed, mean_where, run_budget_sweep, run_detection_sweep, train_detectors,
    TrainedDetectors,
};

const CORPUS_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const EMBED_STREAM: u64 = 4;
const DETECTOR_STREAM: u64 = 5;
const ATTACK_STREAM: u64 = 6;

/// Where the sessions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated per run seed; `config.seed` is replaced by a value derived
    /// from the run seed unless `fixed_seed` is set.
    Synthetic {
        #[serde(default)]
        config: SyntheticConfig,
        #[serde(default)]
        fixed_seed: bool,
    },
    Instacart {
        orders: PathBuf,
        order_products: PathBuf,
        products: PathBuf,
        /// Keep only the first this many sessions.
        #[serde(default)]
        max_sessions: Option<usize>,
    },
    /// A corpus previously written by `ingest` or `synth`.
    Corpus { path: PathBuf },
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Corpus> {
        match self {
            DatasetSpec::Synthetic { config, fixed_seed } => {
                let mut config = config.clone();
                if !fixed_seed {
                    config.seed = rng::derive_seed(seed, CORPUS_STREAM);
                }
                generate_synthetic(&config)
            }
            DatasetSpec::Instacart {
                orders,
                order_products,
                products,
                max_sessions,
            } => {
                let corpus = ingest_instacart(orders, order_products, products)?;
                Ok(match max_sessions {
                    Some(n) => corpus.first_sessions(*n),
                    None => corpus,
                })
            }
            DatasetSpec::Corpus { path } => Corpus::read_json(path),
        }
    }

    /// True when every run seed sees the same corpus.
    pub fn is_seed_independent(&self) -> bool {
        !matches!(
            self,
            DatasetSpec::Synthetic {
                fixed_seed: false,
                ..
            }
        )
    }
}

/// How the pushed item is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetRule {
    /// Uniform draw from the least popular quarter of the items that appear
    /// in at least one organic session.
    BottomQuartile,
    Fixed {
        item: ItemId,
    },
}

impl TargetRule {
    pub fn select(&self, corpus: &Corpus, seed: u64) -> Result<ItemId> {
        match *self {
            TargetRule::Fixed { item } => {
                if item as usize >= corpus.num_items() {
                    return Err(Error::invalid(format!(
                        "target {item} outside catalogue of {} items",
                        corpus.num_items()
                    )));
                }
                Ok(item)
            }
            TargetRule::BottomQuartile => {
                let counts = corpus.item_session_counts();
                let mut seen: Vec<ItemId> = (0..counts.len() as ItemId)
                    .filter(|&i| counts[i as usize] > 0)
                    .collect();
                if seen.is_empty() {
                    return Err(Error::invalid("no item has an organic interaction"));
                }
                seen.sort_by_key(|&i| (counts[i as usize], i));
                let quartile = seen.len().div_ceil(4);
                Ok(seen[rng::child(seed, TARGET_STREAM).gen_range(0..quartile)])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub target: TargetRule,
    pub attacks: Vec<AttackKind>,
    pub seeds: Vec<u64>,
    /// Recommendation list lengths for the budget sweep.
    pub r_values: Vec<usize>,
    /// Malicious-user counts for the budget sweep; 0 means no injection.
    pub budgets: Vec<usize>,
    /// Sessions per malicious user.
    pub sessions_per_user: usize,
    /// Items per injected session.
    pub session_length: usize,
    pub num_reference_items: usize,
    pub visibility_pct: f64,
    pub warmup_ratio: f64,
    /// Injected sessions as a fraction of the organic session count.
    pub detection_fractions: Vec<f64>,
    /// List length the informed attackers target in the detection sweep.
    pub detection_r: usize,
    pub clean_fraction: f64,
    pub embedding_dim: usize,
    pub detector: DetectorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                config: SyntheticConfig::default(),
                fixed_seed: false,
            },
            target: TargetRule::BottomQuartile,
            attacks: AttackKind::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            r_values: vec![5, 10, 20],
            budgets: vec![0, 150, 200, 250, 300, 350],
            sessions_per_user: 10,
            session_length: 8,
            num_reference_items: 5,
            visibility_pct: DEFAULT_VISIBILITY_PCT,
            warmup_ratio: DEFAULT_WARMUP_RATIO,
            detection_fractions: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            detection_r: 10,
            clean_fraction: 0.5,
            embedding_dim: 16,
            detector: DetectorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            source_name: source_name.into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let non_empty = [
            ("attacks", self.attacks.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("r_values", self.r_values.is_empty()),
            ("budgets", self.budgets.is_empty()),
            ("detection_fractions", self.detection_fractions.is_empty()),
        ];
        for (name, empty) in non_empty {
            if empty {
                return Err(Error::invalid(format!("{name} must not be empty")));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("seeds must be distinct"));
        }
        if self.r_values.contains(&0) || self.detection_r == 0 {
            return Err(Error::invalid(
                "recommendation list lengths must be positive",
            ));
        }
        if self.sessions_per_user == 0 || self.session_length == 0 || self.num_reference_items == 0
        {
            return Err(Error::invalid(
                "sessions_per_user, session_length and num_reference_items must be positive",
            ));
        }
        let largest = self.budgets.iter().copied().max().unwrap_or(0);
        if largest.checked_mul(self.sessions_per_user).is_none() {
            return Err(Error::invalid("budgets times sessions_per_user overflows"));
        }
        if !(self.visibility_pct > 0.0 && self.visibility_pct <= 100.0) {
            return Err(Error::invalid("visibility_pct must lie in (0, 100]"));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::invalid("warmup_ratio must lie in (0, 1)"));
        }
        if let Some(f) = self
            .detection_fractions
            .iter()
            .find(|f| !(0.0..=1.0).contains(*f))
        {
            return Err(Error::invalid(format!(
                "detection fraction {f} outside [0, 1]"
            )));
        }
        if !(self.clean_fraction > 0.0 && self.clean_fraction < 1.0) {
            return Err(Error::invalid("clean_fraction must lie in (0, 1)"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be positive"));
        }
        self.detector.validate()
    }

    fn budget(&self, malicious_users: usize) -> AttackBudget {
        AttackBudget::exact(malicious_users, self.sessions_per_user, self.session_length)
    }
}

/// Runs one attack and returns every session it injects, warm-up sessions
/// included. Zero malicious users injects nothing.
pub fn run_attack(
    kind: AttackKind,
    corpus: &Corpus,
    target: ItemId,
    malicious_users: usize,
    r: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<Session>> {
    if malicious_users == 0 {
        return Ok(Vec::new());
    }
    let budget = cfg.budget(malicious_users);
    let params = AttackParams {
        target,
        budget,
        num_reference_items: cfg.num_reference_items,
        r,
        seed,
    };
    Ok(match kind {
        AttackKind::Random => random_attack(corpus, target, &budget, seed)?.sessions,
        AttackKind::WhiteBox => white_box_attack(corpus, &params)?.attack.sessions,
        AttackKind::GrayBox => gray_box_attack(
            corpus,
            &GrayBoxParams {
                attack: params,
                visibility_pct: cfg.visibility_pct,
                warmup_ratio: cfg.warmup_ratio,
            },
        )?
        .all_sessions(),
    })
}

fn attack_seed(seed: u64, kind: AttackKind, point: u64) -> u64 {
    rng::derive_seed(
        rng::derive_seed(rng::derive_seed(seed, ATTACK_STREAM), kind as u64),
        point,
    )
}
