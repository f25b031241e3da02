//! Command-line driver. Every subcommand reads a JSON config, honours
//! `--seed` and writes its artifacts under `--out-dir`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sessionguard::attacks::{
    gray_box_attack, random_attack, white_box_attack, AttackBudget, AttackKind, AttackParams,
    GrayBoxParams, MaliciousSessionSet, DEFAULT_VISIBILITY_PCT, DEFAULT_WARMUP_RATIO,
};
use sessionguard::datasets::{generate_synthetic, Corpus, Session, SyntheticConfig};
use sessionguard::detectors::{
    write_results_csv, BaselineCheckpoint, Detector, DetectorConfig, GanCheckpoint,
};
use sessionguard::experiments::{
    emit_report, run_budget_sweep, run_detection_sweep, train_detectors, DatasetSpec,
    ExperimentConfig, MetricsReport, ReportFormat, TargetRule,
};
use sessionguard::recommender::Recommender;

#[derive(Parser)]
#[command(
    name = "sessionguard",
    version,
    about = "Session-injection attacks on item-based CF and their detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random choice. Sweeps run only this seed when given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus from Instacart CSV exports.
    Ingest(Common),
    /// Generate a cluster-structured synthetic corpus.
    Synth(Common),
    /// Inject one attack into a corpus.
    Attack(Common),
    /// Train the baseline and GAN detectors and score the polluted partition.
    TrainDetector(Common),
    /// Target hit ratio against attacker budget.
    SweepBudget(Common),
    /// Detector precision, recall and F1 against injected fraction.
    SweepDetect(Common),
    /// Merge sweep reports and write CSV summaries.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(c) => ingest(c),
        Command::Synth(c) => synth(c),
        Command::Attack(c) => attack(c),
        Command::TrainDetector(c) => train_detector(c),
        Command::SweepBudget(c) => sweep(c, Sweep::Budget),
        Command::SweepDetect(c) => sweep(c, Sweep::Detect),
        Command::Report(c) => report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Relative paths in a config are taken relative to the config file.
fn resolve(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestConfig {
    orders: PathBuf,
    order_products: PathBuf,
    products: PathBuf,
    #[serde(default)]
    max_sessions: Option<usize>,
}

#[derive(Serialize)]
struct CorpusSummary {
    users: usize,
    items: usize,
    sessions: usize,
}

fn summarize(corpus: &Corpus) -> CorpusSummary {
    CorpusSummary {
        users: corpus.num_users,
        items: corpus.num_items(),
        sessions: corpus.num_sessions(),
    }
}

fn ingest(c: &Common) -> Result<()> {
    let cfg: IngestConfig = read_config(&c.config)?;
    let spec = DatasetSpec::Instacart {
        orders: resolve(&c.config, &cfg.orders),
        order_products: resolve(&c.config, &cfg.order_products),
        products: resolve(&c.config, &cfg.products),
        max_sessions: cfg.max_sessions,
    };
    let corpus = spec.load(c.seed.unwrap_or(0))?;
    prepare_out_dir(&c.out_dir)?;
    corpus.write_json(&c.out_dir.join("corpus.json"))?;
    write_json(&summarize(&corpus), &c.out_dir.join("corpus_summary.json"))
}

fn synth(c: &Common) -> Result<()> {
    let mut cfg: SyntheticConfig = read_config(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let corpus = generate_synthetic(&cfg)?;
    prepare_out_dir(&c.out_dir)?;
    corpus.write_json(&c.out_dir.join("corpus.json"))?;
    write_json(&summarize(&corpus), &c.out_dir.join("corpus_summary.json"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackConfig {
    corpus: PathBuf,
    attack: AttackKind,
    #[serde(default = "default_target")]
    target: TargetRule,
    malicious_users: usize,
    sessions_per_user: usize,
    session_length: usize,
    #[serde(default = "default_reference_items")]
    num_reference_items: usize,
    #[serde(default = "default_r")]
    r: usize,
    #[serde(default = "default_visibility")]
    visibility_pct: f64,
    #[serde(default = "default_warmup")]
    warmup_ratio: f64,
}

fn default_target() -> TargetRule {
    TargetRule::BottomQuartile
}
fn default_reference_items() -> usize {
    5
}
fn default_r() -> usize {
    10
}
fn default_visibility() -> f64 {
    DEFAULT_VISIBILITY_PCT
}
fn default_warmup() -> f64 {
    DEFAULT_WARMUP_RATIO
}

#[derive(Serialize)]
struct AttackSummary {
    attack: AttackKind,
    target: u32,
    reference_item: Option<u32>,
    r: usize,
    injected_sessions: usize,
    warmup_sessions: usize,
    pre_best_hit_ratio: f64,
    pre_target_hit_ratio: f64,
    post_target_hit_ratio: f64,
}

fn attack(c: &Common) -> Result<()> {
    let cfg: AttackConfig = read_config(&c.config)?;
    let seed = c.seed.unwrap_or(0);
    let corpus = Corpus::read_json(&resolve(&c.config, &cfg.corpus))?;
    let target = cfg.target.select(&corpus, seed)?;
    if cfg
        .malicious_users
        .checked_mul(cfg.sessions_per_user)
        .is_none()
    {
        bail!("malicious_users times sessions_per_user overflows");
    }
    let budget = AttackBudget::exact(
        cfg.malicious_users,
        cfg.sessions_per_user,
        cfg.session_length,
    );
    let params = AttackParams {
        target,
        budget,
        num_reference_items: cfg.num_reference_items,
        r: cfg.r,
        seed,
    };
    let (set, warmup): (MaliciousSessionSet, Vec<Session>) = match cfg.attack {
        AttackKind::Random => (random_attack(&corpus, target, &budget, seed)?, Vec::new()),
        AttackKind::WhiteBox => (white_box_attack(&corpus, &params)?.attack, Vec::new()),
        AttackKind::GrayBox => {
            let out = gray_box_attack(
                &corpus,
                &GrayBoxParams {
                    attack: params,
                    visibility_pct: cfg.visibility_pct,
                    warmup_ratio: cfg.warmup_ratio,
                },
            )?;
            (out.attack, out.warmup_sessions)
        }
    };
    let injected: Vec<Session> = warmup.iter().chain(&set.sessions).cloned().collect();
    let attacked = corpus.with_injected(&injected)?;

    let users = corpus.organic_users();
    let hit = |c: &Corpus| -> Result<_> {
        Ok(
            Recommender::from_sessions(&c.sessions, c.num_users, c.num_items())?
                .recommend_all(&users, cfg.r),
        )
    };
    let pre = hit(&corpus)?;
    let post = hit(&attacked)?;
    let summary = AttackSummary {
        attack: cfg.attack,
        target,
        reference_item: set.reference_item,
        r: cfg.r,
        injected_sessions: set.len(),
        warmup_sessions: warmup.len(),
        pre_best_hit_ratio: pre.best_hit_ratio(cfg.r)?,
        pre_target_hit_ratio: pre.hit_ratio(target, cfg.r)?,
        post_target_hit_ratio: post.hit_ratio(target, cfg.r)?,
    };

    prepare_out_dir(&c.out_dir)?;
    set.write_json(&c.out_dir.join("attack.json"))?;
    if !warmup.is_empty() {
        let rows: Vec<_> = warmup.iter().map(|s| (s.user_id, &s.items)).collect();
        write_json(&rows, &c.out_dir.join("warmup_sessions.json"))?;
    }
    attacked.write_json(&c.out_dir.join("attacked_corpus.json"))?;
    write_json(&summary, &c.out_dir.join("attack_summary.json"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    corpus: PathBuf,
    #[serde(default = "default_clean_fraction")]
    clean_fraction: f64,
    #[serde(default = "default_embedding_dim")]
    embedding_dim: usize,
    #[serde(default)]
    detector: DetectorConfig,
}

fn default_clean_fraction() -> f64 {
    0.5
}
fn default_embedding_dim() -> usize {
    16
}

#[derive(Serialize)]
struct TrainSummary {
    clean_sessions: usize,
    holdout_sessions: usize,
    polluted_sessions: usize,
    generator_cv_nll: f64,
    baseline_threshold: f64,
    gan_threshold: f64,
    baseline_flagged: usize,
    gan_flagged: usize,
    embedding_checksum: String,
    embedding_checksum_unchanged: bool,
}

fn train_detector(c: &Common) -> Result<()> {
    let cfg: TrainConfig = read_config(&c.config)?;
    let seed = c.seed.unwrap_or(0);
    let corpus = Corpus::read_json(&resolve(&c.config, &cfg.corpus))?;
    let (split, trained) = train_detectors(
        &corpus,
        cfg.clean_fraction,
        cfg.embedding_dim,
        &cfg.detector,
        seed,
    )?;
    let emb = &trained.embeddings;
    let polluted: Vec<&Session> = split.polluted_sessions().collect();
    let base = trained.baseline.classify_all(emb, &polluted)?;
    let gan = trained.gan.classify_all(emb, &polluted)?;

    prepare_out_dir(&c.out_dir)?;
    let out = &c.out_dir;
    emb.write_csv(&out.join("embeddings.csv"))?;
    BaselineCheckpoint::write_json(&trained.baseline, &out.join("baseline.json"))?;
    GanCheckpoint::write_json(&trained.gan, &out.join("gan.json"))?;
    write_results_csv(&base, &out.join("detections_baseline.csv"))?;
    write_results_csv(&gan, &out.join("detections_gan.csv"))?;
    let summary = TrainSummary {
        clean_sessions: trained.clean_sessions,
        holdout_sessions: trained.holdout.len(),
        polluted_sessions: polluted.len(),
        generator_cv_nll: trained.generator_cv_nll,
        baseline_threshold: trained.baseline.nll_threshold,
        gan_threshold: trained.gan.score_threshold,
        baseline_flagged: base.iter().filter(|r| r.flagged).count(),
        gan_flagged: gan.iter().filter(|r| r.flagged).count(),
        embedding_checksum: emb.checksum().to_string(),
        embedding_checksum_unchanged: trained.embedding_checksum_unchanged,
    };
    write_json(&summary, &out.join("training_summary.json"))
}

enum Sweep {
    Budget,
    Detect,
}

fn load_experiment(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_config(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    match &mut cfg.dataset {
        DatasetSpec::Instacart {
            orders,
            order_products,
            products,
            ..
        } => {
            *orders = resolve(&c.config, orders);
            *order_products = resolve(&c.config, order_products);
            *products = resolve(&c.config, products);
        }
        DatasetSpec::Corpus { path } => *path = resolve(&c.config, path),
        DatasetSpec::Synthetic { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep(c: &Common, kind: Sweep) -> Result<()> {
    let cfg = load_experiment(c)?;
    let report = match kind {
        Sweep::Budget => run_budget_sweep(&cfg)?,
        Sweep::Detect => run_detection_sweep(&cfg)?,
    };
    for path in emit_report(
        &report,
        &c.out_dir,
        &[ReportFormat::Csv, ReportFormat::Json],
    )? {
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportConfig {
    reports: Vec<PathBuf>,
}

fn report(c: &Common) -> Result<()> {
    let cfg: ReportConfig = read_config(&c.config)?;
    let Some((first, rest)) = cfg.reports.split_first() else {
        bail!("config lists no reports");
    };
    let mut merged = MetricsReport::read_json(&resolve(&c.config, first))?;
    for path in rest {
        let path = resolve(&c.config, path);
        let other = MetricsReport::read_json(&path)?;
        merged
            .merge(other)
            .with_context(|| format!("merging {}", path.display()))?;
    }
    for path in emit_report(
        &merged,
        &c.out_dir,
        &[ReportFormat::Csv, ReportFormat::Json],
    )? {
        println!("{}", path.display());
    }
    Ok(())
}
