//! Cluster-structured synthetic session corpora.
//!
//! Items are split into topic clusters (item `i` belongs to cluster
//! `i % num_clusters`) with Zipf popularity inside each cluster. Every user
//! has a home cluster; each item pick in one of their sessions stays in that
//! cluster with probability `cluster_skew` and otherwise falls back to the
//! global popularity distribution.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Corpus, Item, ItemId, Partition, Session, UserId, DEFAULT_SESSION_CAP};
use crate::error::{Error, Result};
use crate::rng;

/// Missing fields take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_sessions: usize,
    /// Inclusive `(min, max)` session length.
    pub session_len_range: (usize, usize),
    pub num_clusters: usize,
    pub cluster_skew: f64,
    pub seed: u64,
    /// Zipf exponent of within-cluster popularity.
    pub popularity_exponent: f64,
}

fn default_popularity_exponent() -> f64 {
    1.0
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 2000,
            num_items: 500,
            num_sessions: 10_000,
            session_len_range: (3, 8),
            num_clusters: 3,
            cluster_skew: 0.8,
            seed: 7,
            popularity_exponent: default_popularity_exponent(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.session_len_range;
        if self.num_users == 0 || self.num_items == 0 || self.num_sessions == 0 {
            return Err(Error::invalid("synthetic counts must be positive"));
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_items {
            return Err(Error::invalid("num_clusters must lie in [1, num_items]"));
        }
        if lo == 0 || lo > hi || hi > DEFAULT_SESSION_CAP {
            return Err(Error::invalid(format!(
                "session_len_range ({lo}, {hi}) must satisfy 1 <= min <= max <= {DEFAULT_SESSION_CAP}"
            )));
        }
        if !(self.cluster_skew > 0.0 && self.cluster_skew <= 1.0) {
            return Err(Error::invalid("cluster_skew must lie in (0, 1]"));
        }
        if !(self.popularity_exponent.is_finite() && self.popularity_exponent >= 0.0) {
            return Err(Error::invalid(
                "popularity_exponent must be finite and >= 0",
            ));
        }
        Ok(())
    }

    pub fn cluster_of(&self, item: ItemId) -> usize {
        item as usize % self.num_clusters
    }
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn pseudo_word(rng: &mut rng::Rng, len: usize) -> String {
    (0..len)
        .map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char)
        .collect()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Corpus> {
    config.validate()?;
    let n_items = config.num_items;
    let n_clusters = config.num_clusters;

    let weight =
        |item: usize| 1.0 / ((item / n_clusters + 1) as f64).powf(config.popularity_exponent);
    let cluster_members: Vec<Vec<usize>> = (0..n_clusters)
        .map(|c| (c..n_items).step_by(n_clusters).collect())
        .collect();
    let cluster_samplers: Vec<WeightedIndex<f64>> = cluster_members
        .iter()
        .map(|members| {
            WeightedIndex::new(members.iter().map(|&i| weight(i))).expect("non-empty cluster")
        })
        .collect();
    let global_sampler = WeightedIndex::new((0..n_items).map(weight)).expect("non-empty catalogue");

    let mut text_rng = rng::child(config.seed, 1);
    let vocab: Vec<Vec<String>> = (0..n_clusters)
        .map(|_| (0..8).map(|_| pseudo_word(&mut text_rng, 6)).collect())
        .collect();
    let items: Vec<Item> = (0..n_items)
        .map(|i| {
            let words = &vocab[i % n_clusters];
            let mut parts: Vec<&str> = (0..3)
                .map(|_| words[text_rng.gen_range(0..words.len())].as_str())
                .collect();
            let unique = pseudo_word(&mut text_rng, 5);
            parts.push(&unique);
            Item {
                id: i as ItemId,
                text: parts.join(" "),
            }
        })
        .collect();

    let mut rng = rng::child(config.seed, 2);
    let home: Vec<usize> = (0..config.num_users)
        .map(|_| rng.gen_range(0..n_clusters))
        .collect();

    let (lo, hi) = config.session_len_range;
    let mut sessions = Vec::with_capacity(config.num_sessions);
    for s in 0..config.num_sessions {
        let user = if s < config.num_users {
            s
        } else {
            rng.gen_range(0..config.num_users)
        };
        let cluster = home[user];
        let len = rng.gen_range(lo..=hi).min(n_items);
        let mut picked: Vec<ItemId> = Vec::with_capacity(len);
        while picked.len() < len {
            let mut item = 0;
            for _ in 0..64 {
                item = if rng.gen::<f64>() < config.cluster_skew {
                    cluster_members[cluster][cluster_samplers[cluster].sample(&mut rng)]
                } else {
                    global_sampler.sample(&mut rng)
                } as ItemId;
                if !picked.contains(&item) {
                    break;
                }
            }
            picked.push(item);
        }
        sessions.push(Session::organic(user as UserId, picked));
    }

    let corpus = Corpus {
        num_users: config.num_users,
        items,
        sessions,
        partition: vec![Partition::Clean; config.num_users],
        original_user_ids: (0..config.num_users as u64).collect(),
        original_item_ids: (0..n_items as u64).collect(),
        session_cap: DEFAULT_SESSION_CAP,
    };
    corpus.validate()?;
    Ok(corpus)
}
