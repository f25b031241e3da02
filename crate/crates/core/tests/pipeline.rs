//! Cross-module runs on small corpora: data in, attacks, recommender,
//! detectors and reports out.

use sessionguard::attacks::{white_box_attack, AttackBudget, AttackParams};
use sessionguard::datasets::{
    generate_synthetic, ingest_instacart_from_readers, Origin, SyntheticConfig,
};
use sessionguard::detectors::DetectorConfig;
use sessionguard::embeddings::{embed_items, load_embeddings};
use sessionguard::experiments::{
    run_budget_sweep, run_detection_sweep, DatasetSpec, ExperimentConfig, MetricsReport, TargetRule,
};
use sessionguard::recommender::Recommender;

fn small_world() -> SyntheticConfig {
    SyntheticConfig {
        num_users: 300,
        num_items: 90,
        num_sessions: 1500,
        ..SyntheticConfig::default()
    }
}

fn fast_detector() -> DetectorConfig {
    DetectorConfig {
        hidden_dim: 8,
        pretrain_epochs: 3,
        disc_pretrain_epochs: 2,
        disc_samples: 128,
        adversarial_epochs: 1,
        num_rollouts: 2,
        pg_batch_size: 16,
        ..DetectorConfig::default()
    }
}

#[test]
fn white_box_raises_the_target_hit_ratio() {
    let corpus = generate_synthetic(&small_world()).unwrap();
    let target = TargetRule::BottomQuartile.select(&corpus, 1).unwrap();
    let users = corpus.organic_users();
    let hit = |c: &sessionguard::datasets::Corpus| {
        Recommender::from_sessions(&c.sessions, c.num_users, c.num_items())
            .unwrap()
            .recommend_all(&users, 10)
            .hit_ratio(target, 10)
            .unwrap()
    };
    let before = hit(&corpus);
    let out = white_box_attack(
        &corpus,
        &AttackParams {
            target,
            budget: AttackBudget::exact(60, 10, 8),
            num_reference_items: 5,
            r: 10,
            seed: 3,
        },
    )
    .unwrap();
    let after = hit(&corpus.with_injected(&out.attack.sessions).unwrap());
    assert!(after > before, "before {before}, after {after}");
    assert!(out
        .attack
        .sessions
        .iter()
        .all(|s| s.origin == Origin::Injected));
}

#[test]
fn sweeps_produce_valid_reports_that_round_trip() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            config: small_world(),
            fixed_seed: false,
        },
        seeds: vec![1],
        r_values: vec![5, 10],
        budgets: vec![0, 30],
        detection_fractions: vec![0.0, 0.1],
        detector: fast_detector(),
        ..ExperimentConfig::default()
    };
    let mut report = run_budget_sweep(&cfg).unwrap();
    assert_eq!(report.budget_rows.len(), 3 * 2 * 2);
    for row in report.budget_rows.iter().filter(|r| r.budget == 0) {
        assert_eq!(row.pre_target_hit_ratio, row.post_target_hit_ratio);
    }
    report.merge(run_detection_sweep(&cfg).unwrap()).unwrap();
    report.validate().unwrap();
    assert_eq!(report.detection_rows.len(), 3 * 2 * 2);
    let s = &report.detector_summaries[0];
    assert!(s.embedding_checksum_unchanged);
    for row in report.detection_rows.iter().filter(|r| r.fraction == 0.0) {
        assert_eq!(row.injected_sessions, 0);
        assert_eq!(row.recall, None);
    }
    let back = MetricsReport::from_json_str(&report.to_json(), "mem").unwrap();
    assert_eq!(back, report);
}

#[test]
fn instacart_readers_build_sessions_in_cart_order() {
    let orders = "order_id,user_id\n5,2\n6,1\n7,2\n";
    let lines = "order_id,product_id,add_to_cart_order\n5,300,2\n5,100,1\n6,200,1\n7,300,1\n";
    let products = "product_id,product_name\n100,Kale\n200,Eggs\n300,Rice\n";
    let corpus =
        ingest_instacart_from_readers(orders.as_bytes(), lines.as_bytes(), products.as_bytes(), 50)
            .unwrap();
    assert_eq!(corpus.num_users, 2);
    assert_eq!(corpus.num_items(), 3);
    let sessions: Vec<(u32, Vec<u32>)> = corpus
        .sessions
        .iter()
        .map(|s| (s.user_id, s.items.clone()))
        .collect();
    // users and items are re-indexed by ascending source id
    assert_eq!(sessions, vec![(1, vec![0, 2]), (0, vec![1]), (1, vec![2])]);
    assert!(ingest_instacart_from_readers(
        orders.as_bytes(),
        "order_id\n".as_bytes(),
        products.as_bytes(),
        50
    )
    .is_err());
}

#[test]
fn embeddings_survive_a_csv_round_trip() {
    let corpus = generate_synthetic(&small_world()).unwrap();
    let emb = embed_items(&corpus.items, 12, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    emb.write_csv(&path).unwrap();
    let back = load_embeddings(&path, corpus.num_items()).unwrap();
    assert_eq!(back.checksum(), emb.checksum());
    assert!(load_embeddings(&path, corpus.num_items() + 1).is_err());
}
