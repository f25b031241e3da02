//! Invariants checked over generated inputs.

use proptest::prelude::*;
use sessionguard::attacks::{random_attack, AttackBudget};
use sessionguard::datasets::{generate_synthetic, Corpus, ItemId, Origin, SyntheticConfig, UserId};
use sessionguard::detectors::percentile;
use sessionguard::experiments::{compute_prf, spearman};
use sessionguard::recommender::{build_similarity, RatingMatrix};

fn small_corpus(seed: u64, users: usize, items: usize, sessions: usize) -> Corpus {
    generate_synthetic(&SyntheticConfig {
        num_users: users,
        num_items: items,
        num_sessions: sessions,
        num_clusters: 2,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prf_counts_ranges_and_harmonic_mean(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let truth: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let flags: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let prf = compute_prf(&truth, &flags).unwrap();
        let tp = pairs.iter().filter(|&&(t, f)| t && f).count();
        let fp = pairs.iter().filter(|&&(t, f)| !t && f).count();
        let fn_ = pairs.iter().filter(|&&(t, f)| t && !f).count();
        prop_assert_eq!((prf.true_positives, prf.false_positives, prf.false_negatives), (tp, fp, fn_));
        prop_assert_eq!(prf.precision.is_none(), tp + fp == 0);
        prop_assert_eq!(prf.recall.is_none(), tp + fn_ == 0);
        for v in [prf.precision, prf.recall, prf.f1].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        match (prf.precision, prf.recall, prf.f1) {
            (Some(p), Some(r), Some(f)) if p + r > 0.0 => prop_assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12),
            (Some(_), Some(_), Some(f)) => prop_assert_eq!(f, 0.0),
            (_, _, f) => prop_assert!(f.is_none()),
        }
    }

    #[test]
    fn spearman_is_bounded_symmetric_and_rank_based(
        xy in prop::collection::vec((-100i32..100, -100i32..100), 2..40),
    ) {
        let x: Vec<f64> = xy.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = xy.iter().map(|p| p.1 as f64).collect();
        let rho = spearman(&x, &y).unwrap();
        prop_assert_eq!(rho, spearman(&y, &x).unwrap());
        if let Some(r) = rho {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            // strictly increasing transforms keep ranks
            let cubed: Vec<f64> = x.iter().map(|v| v * v * v + 3.0).collect();
            prop_assert!((spearman(&cubed, &y).unwrap().unwrap() - r).abs() < 1e-12);
            let negated: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((spearman(&negated, &y).unwrap().unwrap() + r).abs() < 1e-12);
        }
        let constant = x.iter().all(|&v| v == x[0]);
        prop_assert_eq!(spearman(&x, &x).unwrap(), (!constant).then_some(1.0));
    }

    #[test]
    fn similarity_is_symmetric_and_in_unit_range(
        entries in prop::collection::vec((0u32..20, 0u32..15, 1u8..6), 0..120),
    ) {
        let m = RatingMatrix::from_entries(20, 15, entries.iter().map(|&(u, i, q)| (u as UserId, i as ItemId, q as f64))).unwrap();
        let sim = build_similarity(&m);
        for i in 0..15 {
            for j in 0..15 {
                let a = sim.get(i, j).unwrap_or(0.0);
                let b = sim.get(j, i).unwrap_or(0.0);
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
            let rated = !m.item_ratings(i).is_empty();
            prop_assert_eq!(sim.get(i, i), rated.then_some(1.0));
        }
    }

    #[test]
    fn random_attack_respects_budget(
        seed in any::<u64>(),
        users in 1usize..20,
        o in 1usize..5,
        sigma in 1usize..12,
        target in 0u32..40,
    ) {
        let corpus = small_corpus(seed % 7, 30, 40, 120);
        let budget = AttackBudget::exact(users, o, sigma);
        let set = random_attack(&corpus, target, &budget, seed).unwrap();
        prop_assert!(set.check_constraints(&budget).is_ok());
        prop_assert_eq!(set.sessions.len(), users * o);
        for (k, s) in set.sessions.iter().enumerate() {
            prop_assert_eq!(s.items.len(), sigma);
            prop_assert_eq!(s.origin, Origin::Injected);
            prop_assert_eq!(s.user_id as usize, corpus.num_users + k / o);
            let mut distinct = s.items.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), sigma);
        }
        prop_assert!(corpus.with_injected(&set.sessions).is_ok());
    }

    #[test]
    fn first_sessions_keeps_prefix_and_dense_users(seed in 0u64..50, n in 0usize..300) {
        let corpus = small_corpus(seed, 40, 30, 200);
        let sub = corpus.first_sessions(n);
        prop_assert!(sub.validate().is_ok());
        prop_assert_eq!(sub.sessions.len(), n.min(corpus.sessions.len()));
        let mut next = 0;
        for (a, b) in sub.sessions.iter().zip(&corpus.sessions) {
            prop_assert_eq!(&a.items, &b.items);
            prop_assert_eq!(sub.original_user_ids[a.user_id as usize], corpus.original_user_ids[b.user_id as usize]);
            prop_assert!(a.user_id <= next);
            if a.user_id == next {
                next += 1;
            }
        }
        prop_assert_eq!(sub.num_users, next as usize);
    }

    #[test]
    fn percentile_is_monotone_and_bounded(
        values in prop::collection::vec(-1e6f64..1e6, 1..100),
        p in 0.0f64..100.0,
        q in 0.0f64..100.0,
    ) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = percentile(&values, lo).unwrap();
        let b = percentile(&values, hi).unwrap();
        prop_assert!(a <= b);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= a && b <= max);
    }

    #[test]
    fn corpus_json_round_trips(seed in 0u64..50) {
        let corpus = small_corpus(seed, 25, 20, 80);
        let back = Corpus::from_json_str(&corpus.to_json()).unwrap();
        prop_assert_eq!(back, corpus);
    }
}
