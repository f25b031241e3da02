use fnv::FnvHashMap;

use crate::datasets::{Corpus, ItemId, Session};

/// First-order item transition counts with add-one smoothing:
/// `P(b | a) = (count(a→b) + 1) / (out(a) + |V|)`.
#[derive(Clone, Debug)]
pub struct TransitionModel {
    num_items: usize,
    pairs: FnvHashMap<(ItemId, ItemId), u64>,
    outgoing: Vec<u64>,
}

impl TransitionModel {
    pub fn fit<'a>(sessions: impl IntoIterator<Item = &'a [ItemId]>, num_items: usize) -> Self {
        let mut pairs = FnvHashMap::default();
        let mut outgoing = vec![0u64; num_items];
        for s in sessions {
            for w in s.windows(2) {
                *pairs.entry((w[0], w[1])).or_insert(0) += 1;
                outgoing[w[0] as usize] += 1;
            }
        }
        TransitionModel {
            num_items,
            pairs,
            outgoing,
        }
    }

    /// Fit on the organic sessions of `corpus`.
    pub fn fit_organic(corpus: &Corpus) -> Self {
        Self::fit(
            corpus.organic_sessions().map(|s| s.items.as_slice()),
            corpus.num_items(),
        )
    }

    pub fn log_prob(&self, from: ItemId, to: ItemId) -> f64 {
        let count = self.pairs.get(&(from, to)).copied().unwrap_or(0);
        ((count + 1) as f64 / (self.outgoing[from as usize] + self.num_items as u64) as f64).ln()
    }

    /// Mean log-probability over every transition in `sessions`; 0 when
    /// there are no transitions.
    pub fn mean_log_likelihood<'a>(&self, sessions: impl IntoIterator<Item = &'a Session>) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for s in sessions {
            for w in s.items.windows(2) {
                total += self.log_prob(w[0], w[1]);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

/// Plausibility of a candidate pollution: mean transition log-likelihood of
/// the injected sessions under a model fit to the corpus's organic sessions.
/// Higher is more plausible.
pub fn score_candidate(injected: &[Session], corpus: &Corpus) -> f64 {
    TransitionModel::fit_organic(corpus).mean_log_likelihood(injected)
}
