use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng as _;

use super::whitebox::{build_candidates, reference_items, select, CandidateScore};
use super::{check_target, AttackKind, AttackParams, MaliciousSessionSet, TransitionModel};
use crate::datasets::{Corpus, ItemId, Session, UserId};
use crate::error::{Error, Result};
use crate::recommender::Recommender;
use crate::rng;

pub const DEFAULT_VISIBILITY_PCT: f64 = 10.0;
pub const DEFAULT_WARMUP_RATIO: f64 = 0.20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrayBoxParams {
    pub attack: AttackParams,
    /// Percentage of organic sessions the attacker can see, in `(0, 100]`.
    pub visibility_pct: f64,
    /// Fraction of malicious users spent on warm-up, in `(0, 1)`.
    pub warmup_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayBoxOutcome {
    /// Target-bearing sessions of the non-warm-up users.
    pub attack: MaliciousSessionSet,
    /// Sessions the warm-up users emitted. They are part of the system's
    /// data from then on but carry no target.
    pub warmup_sessions: Vec<Session>,
    /// `B̂`: reference items ranked from the warm-up users' recommendations.
    pub reference_items: Vec<ItemId>,
    pub candidates: Vec<CandidateScore>,
}

impl GrayBoxOutcome {
    /// Everything the attacker injected into the platform.
    pub fn all_sessions(&self) -> Vec<Session> {
        let mut out = self.warmup_sessions.clone();
        out.extend_from_slice(&self.attack.sessions);
        out
    }
}

/// Number of warm-up users for a budget of `users` malicious users.
pub fn warmup_users(users: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * users as f64).ceil() as usize
}

/// Partial-knowledge attack.
///
/// 1. The attacker sees a uniform `p%` sample of the organic sessions.
/// 2. `⌈ε·|U^m|⌉` warm-up users each emit `o` popularity-weighted sessions
///    (drawn from the visible sample, target excluded) into the platform.
/// 3. The platform's recommender, now including the warm-up data, serves
///    the warm-up users; their lists stand in for the real recommender.
/// 4. The `|B|` items with the highest hit ratio in those lists become the
///    reference items, and the remaining users inject sessions built from
///    the visible data exactly as in the white-box attack.
pub fn gray_box_attack(corpus: &Corpus, params: &GrayBoxParams) -> Result<GrayBoxOutcome> {
    let ap = &params.attack;
    ap.budget.validate(corpus.session_cap)?;
    check_target(corpus, ap.target)?;
    if !(params.visibility_pct > 0.0 && params.visibility_pct <= 100.0) {
        return Err(Error::invalid(format!(
            "visibility must lie in (0, 100], got {}",
            params.visibility_pct
        )));
    }
    if !(params.warmup_ratio > 0.0 && params.warmup_ratio < 1.0) {
        return Err(Error::invalid(format!(
            "warm-up ratio must lie in (0, 1), got {}",
            params.warmup_ratio
        )));
    }
    if ap.num_reference_items == 0 {
        return Err(Error::invalid(
            "gray-box attack needs at least one reference item",
        ));
    }
    let n_warm = warmup_users(ap.budget.malicious_users, params.warmup_ratio);
    let n_attack = ap.budget.malicious_users.saturating_sub(n_warm);
    if n_warm == 0 || n_attack == 0 {
        return Err(Error::invalid(format!(
            "budget of {} users leaves no room for both warm-up and attack users",
            ap.budget.malicious_users
        )));
    }
    let n_items = corpus.num_items();
    let sigma = ap.budget.session_length;
    if sigma + 2 > n_items {
        return Err(Error::invalid(format!(
            "session length {sigma} too long for {n_items} items"
        )));
    }
    let o = ap.budget.sessions_per_user;

    // 1. visible sample
    let organic: Vec<&Session> = corpus.organic_sessions().collect();
    if organic.is_empty() {
        return Err(Error::invalid("gray-box attack needs organic sessions"));
    }
    let n_visible = ((params.visibility_pct / 100.0 * organic.len() as f64).round() as usize)
        .clamp(1, organic.len());
    let mut picks = index::sample(&mut rng::child(ap.seed, 1), organic.len(), n_visible).into_vec();
    picks.sort_unstable();
    let visible: Vec<&[ItemId]> = picks.iter().map(|&i| organic[i].items.as_slice()).collect();

    // 2. warm-up sessions
    let mut popularity = vec![0.0f64; n_items];
    for s in &visible {
        for &i in *s {
            popularity[i as usize] += 1.0;
        }
    }
    popularity[ap.target as usize] = 0.0;
    if popularity.iter().filter(|&&w| w > 0.0).count() < sigma {
        // Too little visible data: spread over everything but the target.
        popularity.iter_mut().for_each(|w| *w += 1.0);
        popularity[ap.target as usize] = 0.0;
    }
    let popular = WeightedIndex::new(&popularity).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::child(ap.seed, 2);
    let first_warm = corpus.num_users as UserId;
    let mut warmup_sessions = Vec::with_capacity(n_warm * o);
    for k in 0..n_warm * o {
        let mut items: Vec<ItemId> = Vec::with_capacity(sigma);
        while items.len() < sigma {
            let j = popular.sample(&mut rng) as ItemId;
            if !items.contains(&j) {
                items.push(j);
            }
        }
        // shuffle away the popularity order
        for pos in (1..items.len()).rev() {
            items.swap(pos, rng.gen_range(0..=pos));
        }
        warmup_sessions.push(Session::injected(first_warm + (k / o) as UserId, items));
    }

    // 3. probe the platform
    let platform_users = corpus.num_users + n_warm;
    let platform = Recommender::from_sessions(
        corpus.sessions.iter().chain(&warmup_sessions),
        platform_users,
        n_items,
    )?;
    let warm_ids: Vec<UserId> = (first_warm..first_warm + n_warm as UserId).collect();
    let probe = platform.recommend_all(&warm_ids, ap.r);
    let reference_items = reference_items(&probe, ap.r, ap.num_reference_items, ap.target)?;

    // 4. mimic on visible data, score against the visible data
    let model = TransitionModel::fit(visible.iter().copied(), n_items);
    let first_attack = first_warm + n_warm as UserId;
    let candidates = build_candidates(
        &visible,
        n_items,
        &reference_items,
        ap,
        n_attack * o,
        first_attack,
        &model,
    )?;
    let scores: Vec<CandidateScore> = candidates.iter().map(|c| c.score).collect();
    let best = select(candidates).expect("at least one reference item");
    Ok(GrayBoxOutcome {
        attack: MaliciousSessionSet {
            algorithm: AttackKind::GrayBox,
            target: ap.target,
            reference_item: Some(best.score.reference_item),
            seed: ap.seed,
            sessions: best.sessions,
        },
        warmup_sessions,
        reference_items,
        candidates: scores,
    })
}
