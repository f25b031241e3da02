//! Push attacks that inject sessions containing a target item.
//!
//! Three attackers are provided: a random baseline, a white-box attacker
//! that sees all data and the recommender, and a gray-box attacker that sees
//! a sample of the data and probes the recommender with warm-up accounts.
//! Both informed attackers mimic the interaction pattern of the items with
//! the highest hit ratio and keep the candidate whose sessions look most
//! like organic traffic.

mod graybox;
mod markov;
mod whitebox;

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{Corpus, ItemId, Origin, Session, UserId};
use crate::error::{Error, Result};
use crate::recommender::RecommendationTable;
use crate::rng;

pub use graybox::{
    gray_box_attack, warmup_users, GrayBoxOutcome, GrayBoxParams, DEFAULT_VISIBILITY_PCT,
    DEFAULT_WARMUP_RATIO,
};
pub use markov::{score_candidate, TransitionModel};
pub use whitebox::{white_box_attack, WhiteBoxOutcome};

/// Attacker resources and the constraints every injected session obeys:
/// `malicious_users * sessions_per_user <= cap` and
/// `session_length <= session cap of the corpus`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub malicious_users: usize,
    pub sessions_per_user: usize,
    pub session_length: usize,
    pub cap: usize,
}

impl AttackBudget {
    /// Budget whose cap is exactly the number of sessions it injects.
    pub fn exact(malicious_users: usize, sessions_per_user: usize, session_length: usize) -> Self {
        AttackBudget {
            malicious_users,
            sessions_per_user,
            session_length,
            cap: malicious_users * sessions_per_user,
        }
    }

    pub fn total_sessions(&self) -> usize {
        self.malicious_users * self.sessions_per_user
    }

    pub fn validate(&self, session_cap: usize) -> Result<()> {
        if self.sessions_per_user == 0 {
            return Err(Error::invalid("sessions_per_user must be positive"));
        }
        if self.session_length == 0 || self.session_length > session_cap {
            return Err(Error::invalid(format!(
                "session length {} outside [1, {session_cap}]",
                self.session_length
            )));
        }
        if self.total_sessions() > self.cap {
            return Err(Error::invalid(format!(
                "{} users x {} sessions exceeds budget {}",
                self.malicious_users, self.sessions_per_user, self.cap
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Random,
    GrayBox,
    WhiteBox,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [
        AttackKind::Random,
        AttackKind::GrayBox,
        AttackKind::WhiteBox,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Random => "random",
            AttackKind::GrayBox => "gray_box",
            AttackKind::WhiteBox => "white_box",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(AttackKind::Random),
            "gray_box" | "gray-box" | "graybox" => Ok(AttackKind::GrayBox),
            "white_box" | "white-box" | "whitebox" => Ok(AttackKind::WhiteBox),
            other => Err(Error::invalid(format!("unknown attack `{other}`"))),
        }
    }
}

/// Sessions injected by one attack. Malicious users get fresh ids after the
/// corpus's existing users; user `k` owns sessions
/// `k*o .. (k+1)*o`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaliciousSessionSet {
    pub algorithm: AttackKind,
    pub target: ItemId,
    pub reference_item: Option<ItemId>,
    pub seed: u64,
    pub sessions: Vec<Session>,
}

/// On-disk shape of a [`MaliciousSessionSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackFile {
    pub target: ItemId,
    pub algorithm: AttackKind,
    pub seed: u64,
    #[serde(default)]
    pub reference_item: Option<ItemId>,
    pub sessions: Vec<Vec<ItemId>>,
    pub user_ids: Vec<UserId>,
}

impl MaliciousSessionSet {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn to_file(&self) -> AttackFile {
        AttackFile {
            target: self.target,
            algorithm: self.algorithm,
            seed: self.seed,
            reference_item: self.reference_item,
            sessions: self.sessions.iter().map(|s| s.items.clone()).collect(),
            user_ids: self.sessions.iter().map(|s| s.user_id).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("attack serializes")
    }

    /// Parses and structurally validates an attack file: one user id per
    /// session, no empty sessions, and the target present exactly once in
    /// every session.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: AttackFile = serde_json::from_str(text).map_err(|source| Error::Json {
            source_name: "attack".into(),
            source,
        })?;
        if file.user_ids.len() != file.sessions.len() {
            return Err(Error::invalid(
                "attack: user_ids and sessions differ in length",
            ));
        }
        for (idx, s) in file.sessions.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid(format!("attack: session {idx} is empty")));
            }
            if s.iter().filter(|&&i| i == file.target).count() != 1 {
                return Err(Error::invalid(format!(
                    "attack: session {idx} must contain the target exactly once"
                )));
            }
        }
        Ok(MaliciousSessionSet {
            algorithm: file.algorithm,
            target: file.target,
            reference_item: file.reference_item,
            seed: file.seed,
            sessions: file
                .sessions
                .into_iter()
                .zip(file.user_ids)
                .map(|(items, u)| Session::injected(u, items))
                .collect(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Checks the set against the budget constraints and per-session shape.
    pub fn check_constraints(&self, budget: &AttackBudget) -> Result<()> {
        if self.sessions.len() > budget.cap {
            return Err(Error::invalid(format!(
                "{} sessions exceed budget {}",
                self.sessions.len(),
                budget.cap
            )));
        }
        for s in &self.sessions {
            if s.len() > budget.session_length {
                return Err(Error::invalid(format!(
                    "session of length {} exceeds {}",
                    s.len(),
                    budget.session_length
                )));
            }
            if s.items.iter().filter(|&&i| i == self.target).count() != 1 {
                return Err(Error::invalid(
                    "session must contain the target exactly once",
                ));
            }
            if s.origin != Origin::Injected {
                return Err(Error::invalid("attack session not marked injected"));
            }
        }
        Ok(())
    }
}

/// Common inputs to the informed attackers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackParams {
    pub target: ItemId,
    pub budget: AttackBudget,
    /// `|B|`: number of high-hit-ratio reference items tried.
    pub num_reference_items: usize,
    /// Length of the recommendation lists the attacker observes.
    pub r: usize,
    pub seed: u64,
}

pub(crate) fn check_target(corpus: &Corpus, target: ItemId) -> Result<()> {
    if target as usize >= corpus.num_items() {
        return Err(Error::invalid(format!(
            "target {target} outside catalogue of {} items",
            corpus.num_items()
        )));
    }
    Ok(())
}

/// `budget.total_sessions()` sessions of `σ − 1` distinct uniformly random
/// non-target items with the target at a uniformly random position.
pub fn random_attack(
    corpus: &Corpus,
    target: ItemId,
    budget: &AttackBudget,
    seed: u64,
) -> Result<MaliciousSessionSet> {
    budget.validate(corpus.session_cap)?;
    check_target(corpus, target)?;
    let n_items = corpus.num_items();
    let sigma = budget.session_length;
    if sigma > n_items {
        return Err(Error::invalid(format!(
            "session length {sigma} exceeds catalogue size {n_items}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let base = corpus.num_users as UserId;
    let mut sessions = Vec::with_capacity(budget.total_sessions());
    for k in 0..budget.total_sessions() {
        let mut items: Vec<ItemId> = index::sample(&mut rng, n_items - 1, sigma - 1)
            .into_iter()
            .map(|i| {
                if i as ItemId >= target {
                    i as ItemId + 1
                } else {
                    i as ItemId
                }
            })
            .collect();
        let pos = rng.gen_range(0..sigma);
        items.insert(pos, target);
        let user = base + (k / budget.sessions_per_user) as UserId;
        sessions.push(Session::injected(user, items));
    }
    Ok(MaliciousSessionSet {
        algorithm: AttackKind::Random,
        target,
        reference_item: None,
        seed,
        sessions,
    })
}

/// The `count` items with the highest hit ratio in `table` at cutoff `r`,
/// ties by ascending id. Returns every item when `count >= |V|`.
pub fn top_hit_ratio_items(
    table: &RecommendationTable,
    r: usize,
    count: usize,
) -> Result<Vec<ItemId>> {
    if count == 0 {
        return Err(Error::invalid("reference item count must be >= 1"));
    }
    let hits = table.hit_counts(r)?;
    let mut order: Vec<ItemId> = (0..hits.len() as ItemId).collect();
    order.sort_by(|&a, &b| hits[b as usize].cmp(&hits[a as usize]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(order)
}

/// Probability of each item co-occurring with `b`: proportional to the
/// number of sessions containing both, plus one for every item other than
/// `b`. `p(b) = 0`.
pub fn interaction_distribution<'a>(
    sessions: impl IntoIterator<Item = &'a [ItemId]>,
    num_items: usize,
    b: ItemId,
) -> Result<Vec<f64>> {
    if b as usize >= num_items {
        return Err(Error::invalid(format!("reference item {b} out of range")));
    }
    if num_items < 2 {
        return Err(Error::invalid(
            "interaction distribution needs at least two items",
        ));
    }
    let mut counts = vec![1.0f64; num_items];
    counts[b as usize] = 0.0;
    let mut stamp = vec![usize::MAX; num_items];
    for (idx, s) in sessions.into_iter().enumerate() {
        if !s.contains(&b) {
            continue;
        }
        for &j in s {
            if j != b && stamp[j as usize] != idx {
                stamp[j as usize] = idx;
                counts[j as usize] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Draws `len` distinct items from `dist` (with replacement, resampling
/// collisions) with `exclude` removed from the support.
pub(crate) fn sample_distinct(
    dist: &[f64],
    exclude: ItemId,
    len: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<ItemId>> {
    let mut weights = dist.to_vec();
    weights[exclude as usize] = 0.0;
    let support = weights.iter().filter(|&&w| w > 0.0).count();
    if len > support {
        return Err(Error::invalid(format!(
            "cannot draw {len} distinct items from a support of {support}"
        )));
    }
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out: Vec<ItemId> = Vec::with_capacity(len);
    while out.len() < len {
        let mut pick = None;
        for _ in 0..1000 {
            let j = sampler.sample(rng) as ItemId;
            if !out.contains(&j) {
                pick = Some(j);
                break;
            }
        }
        // Heavily concentrated distributions: fall back to the most likely
        // unused item.
        let j = pick.unwrap_or_else(|| {
            (0..weights.len() as ItemId)
                .filter(|j| weights[*j as usize] > 0.0 && !out.contains(j))
                .max_by(|a, b| {
                    weights[*a as usize]
                        .total_cmp(&weights[*b as usize])
                        .then(b.cmp(a))
                })
                .expect("support checked above")
        });
        out.push(j);
    }
    Ok(out)
}

/// Builds the sessions for one reference item: draw `σ` distinct items from
/// `dist` (target excluded), then overwrite a uniformly random position with
/// the target.
pub(crate) fn mimic_sessions(
    dist: &[f64],
    target: ItemId,
    num_sessions: usize,
    sessions_per_user: usize,
    session_length: usize,
    first_user: UserId,
    rng: &mut rng::Rng,
) -> Result<Vec<Session>> {
    let mut out = Vec::with_capacity(num_sessions);
    for k in 0..num_sessions {
        let mut items = sample_distinct(dist, target, session_length, rng)?;
        let pos = rng.gen_range(0..session_length);
        items[pos] = target;
        out.push(Session::injected(
            first_user + (k / sessions_per_user) as UserId,
            items,
        ));
    }
    Ok(out)
}
