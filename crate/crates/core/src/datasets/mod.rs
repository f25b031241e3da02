//! Session corpora: the ground-truth world that attacks modify and detectors
//! are evaluated against.
//!
//! A [`Corpus`] holds the item catalogue, every session (organic or
//! injected) and the clean/polluted partition of users. Item and user ids are
//! dense indices; the ids from the source data live in side tables.

mod instacart;
mod synthetic;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use instacart::{
    ingest_instacart, ingest_instacart_from_readers, parse_order_products, parse_orders,
    parse_products, OrderProductRow,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};

pub type ItemId = u32;
pub type UserId = u32;

/// Maximum number of items in one session. Longer ingested orders are
/// truncated to this length.
pub const DEFAULT_SESSION_CAP: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    /// Free text standing in for title, description and brand.
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Organic,
    Injected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: UserId,
    pub items: Vec<ItemId>,
    /// Ground truth. Detectors never read this at inference time.
    pub origin: Origin,
}

impl Session {
    pub fn organic(user_id: UserId, items: Vec<ItemId>) -> Self {
        Session {
            user_id,
            items,
            origin: Origin::Organic,
        }
    }

    pub fn injected(user_id: UserId, items: Vec<ItemId>) -> Self {
        Session {
            user_id,
            items,
            origin: Origin::Injected,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Clean,
    Polluted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub num_users: usize,
    pub items: Vec<Item>,
    pub sessions: Vec<Session>,
    /// Indexed by dense user id.
    pub partition: Vec<Partition>,
    /// Source-data user id for each dense user id.
    pub original_user_ids: Vec<u64>,
    /// Source-data item id for each dense item id.
    pub original_item_ids: Vec<u64>,
    #[serde(default = "default_session_cap")]
    pub session_cap: usize,
}

fn default_session_cap() -> usize {
    DEFAULT_SESSION_CAP
}

impl Corpus {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn organic_sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.iter().filter(|s| s.origin == Origin::Organic)
    }

    pub fn num_organic_sessions(&self) -> usize {
        self.organic_sessions().count()
    }

    /// Sessions owned by users in the polluted partition, in corpus order.
    pub fn polluted_sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions
            .iter()
            .filter(|s| self.partition[s.user_id as usize] == Partition::Polluted)
    }

    /// Users that have at least one organic session, ascending.
    pub fn organic_users(&self) -> Vec<UserId> {
        let mut seen = vec![false; self.num_users];
        for s in self.organic_sessions() {
            seen[s.user_id as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(u, _)| u as UserId)
            .collect()
    }

    /// Number of organic sessions each item appears in.
    pub fn item_session_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_items()];
        let mut last_seen = vec![usize::MAX; self.num_items()];
        for (idx, s) in self.organic_sessions().enumerate() {
            for &i in &s.items {
                if last_seen[i as usize] != idx {
                    last_seen[i as usize] = idx;
                    counts[i as usize] += 1;
                }
            }
        }
        counts
    }

    /// Sessions of clean-partition users, checked for provenance.
    ///
    /// Fails if an injected session is owned by a clean user: detectors must
    /// only ever see data the operator trusts.
    pub fn clean_sessions(&self) -> Result<CleanSessions> {
        let mut sequences = Vec::new();
        for (idx, s) in self.sessions.iter().enumerate() {
            if self.partition[s.user_id as usize] != Partition::Clean {
                continue;
            }
            if s.origin != Origin::Organic {
                return Err(Error::Provenance(format!(
                    "session {idx} is injected but owned by clean user {}",
                    s.user_id
                )));
            }
            sequences.push(s.items.clone());
        }
        Ok(CleanSessions { sequences })
    }

    /// Returns a copy with `extra` appended. Users referenced by `extra`
    /// beyond the current user count are created and placed in the polluted
    /// partition.
    pub fn with_injected(&self, extra: &[Session]) -> Result<Corpus> {
        let mut out = self.clone();
        let max_user = extra
            .iter()
            .map(|s| s.user_id as usize + 1)
            .max()
            .unwrap_or(0);
        if max_user > out.num_users {
            let first_new = out.num_users;
            out.partition.resize(max_user, Partition::Polluted);
            out.original_user_ids
                .extend((first_new..max_user).map(|u| u as u64));
            out.num_users = max_user;
        }
        for s in extra {
            if s.origin == Origin::Injected && out.partition[s.user_id as usize] == Partition::Clean
            {
                return Err(Error::Provenance(format!(
                    "cannot inject under clean user {}",
                    s.user_id
                )));
            }
        }
        out.sessions.extend_from_slice(extra);
        out.validate()?;
        Ok(out)
    }

    /// The first `n` sessions, with users that keep no session dropped and the
    /// rest re-indexed densely in order of first appearance.
    pub fn first_sessions(&self, n: usize) -> Corpus {
        let mut remap = vec![UserId::MAX; self.num_users];
        let mut partition = Vec::new();
        let mut original_user_ids = Vec::new();
        let mut sessions = Vec::with_capacity(n.min(self.sessions.len()));
        for s in self.sessions.iter().take(n) {
            let u = s.user_id as usize;
            if remap[u] == UserId::MAX {
                remap[u] = partition.len() as UserId;
                partition.push(self.partition[u]);
                original_user_ids.push(self.original_user_ids[u]);
            }
            sessions.push(Session {
                user_id: remap[u],
                ..s.clone()
            });
        }
        Corpus {
            num_users: partition.len(),
            items: self.items.clone(),
            sessions,
            partition,
            original_user_ids,
            original_item_ids: self.original_item_ids.clone(),
            session_cap: self.session_cap,
        }
    }

    /// Checks every structural invariant. Used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("corpus: {msg}")));
        if self.partition.len() != self.num_users {
            return bad(format!(
                "partition covers {} users, expected {}",
                self.partition.len(),
                self.num_users
            ));
        }
        if self.original_user_ids.len() != self.num_users {
            return bad("original_user_ids length differs from num_users".into());
        }
        if self.original_item_ids.len() != self.items.len() {
            return bad("original_item_ids length differs from item count".into());
        }
        if self.session_cap == 0 {
            return bad("session cap must be positive".into());
        }
        for (idx, item) in self.items.iter().enumerate() {
            if item.id as usize != idx {
                return bad(format!("item at position {idx} has id {}", item.id));
            }
        }
        let n_items = self.items.len();
        for (idx, s) in self.sessions.iter().enumerate() {
            if s.user_id as usize >= self.num_users {
                return bad(format!("session {idx} has user {} out of range", s.user_id));
            }
            if s.items.is_empty() || s.items.len() > self.session_cap {
                return bad(format!(
                    "session {idx} has length {} outside [1, {}]",
                    s.items.len(),
                    self.session_cap
                ));
            }
            if let Some(&i) = s.items.iter().find(|&&i| i as usize >= n_items) {
                return bad(format!("session {idx} references item {i} out of range"));
            }
            if s.origin == Origin::Injected
                && self.partition[s.user_id as usize] != Partition::Polluted
            {
                return bad(format!("injected session {idx} owned by a clean user"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("corpus serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Corpus> {
        let corpus: Corpus = serde_json::from_str(text).map_err(|source| Error::Json {
            source_name: "corpus".into(),
            source,
        })?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|source| Error::Json {
            source_name: path.display().to_string(),
            source,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Corpus> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_json_str(&text)
    }
}

/// Uniform per-user clean/polluted assignment with exactly
/// `round(clean_fraction * |U|)` clean users.
///
/// Users that already own injected sessions are always polluted; the clean
/// quota is drawn from the remaining users.
pub fn split_clean_polluted(corpus: &Corpus, clean_fraction: f64, seed: u64) -> Result<Corpus> {
    if !(clean_fraction > 0.0 && clean_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "clean fraction must lie in (0, 1), got {clean_fraction}"
        )));
    }
    let mut forced = vec![false; corpus.num_users];
    for s in &corpus.sessions {
        if s.origin == Origin::Injected {
            forced[s.user_id as usize] = true;
        }
    }
    let mut eligible: Vec<usize> = (0..corpus.num_users).filter(|&u| !forced[u]).collect();
    let n_clean = ((clean_fraction * corpus.num_users as f64).round() as usize).min(eligible.len());
    let mut rng = rng::seeded(seed);
    eligible.shuffle(&mut rng);

    let mut out = corpus.clone();
    out.partition = vec![Partition::Polluted; corpus.num_users];
    for &u in &eligible[..n_clean] {
        out.partition[u] = Partition::Clean;
    }
    Ok(out)
}

/// Organic sessions of clean users. Only obtainable through
/// [`Corpus::clean_sessions`], which enforces provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanSessions {
    sequences: Vec<Vec<ItemId>>,
}

impl CleanSessions {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<ItemId>] {
        &self.sequences
    }

    pub fn max_item(&self) -> Option<ItemId> {
        self.sequences.iter().flatten().copied().max()
    }

    /// Splits off a seeded random `fraction` as a held-out set. Returns
    /// `(train, holdout)`; both keep corpus order.
    pub fn split_holdout(
        &self,
        fraction: f64,
        seed: u64,
    ) -> Result<(CleanSessions, CleanSessions)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!(
                "holdout fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n = self.sequences.len();
        let n_holdout = ((fraction * n as f64).round() as usize).clamp(1.min(n), n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(seed));
        let mut is_holdout = vec![false; n];
        for &i in &order[..n_holdout] {
            is_holdout[i] = true;
        }
        let (mut train, mut holdout) = (Vec::new(), Vec::new());
        for (seq, held) in self.sequences.iter().zip(is_holdout) {
            if held {
                holdout.push(seq.clone());
            } else {
                train.push(seq.clone());
            }
        }
        Ok((
            CleanSessions { sequences: train },
            CleanSessions { sequences: holdout },
        ))
    }

    /// Empirical session-length distribution as `(length, count)` pairs.
    pub fn length_histogram(&self) -> Vec<(usize, usize)> {
        let mut hist = std::collections::BTreeMap::new();
        for s in &self.sequences {
            *hist.entry(s.len()).or_insert(0usize) += 1;
        }
        hist.into_iter().collect()
    }
}
