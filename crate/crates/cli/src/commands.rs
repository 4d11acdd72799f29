use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ebr_core::corpus::{load_catalog, load_engagement, load_labels, Catalog, QueryEngagement};
use ebr_core::dataset::{
    assemble_dataset, build_cascade, build_warmup, read_pairs, synthesize_pairs, write_pairs,
};
use ebr_core::encoder::{EmbeddingModel, Stage};
use ebr_core::evaluator::{
    category_separation_report, evaluate, export_score_distribution, write_report, Bm25Params,
    Bm25Scorer, EmbeddingScorer, EvalConfig, EvalMode, MetricReport,
};
use ebr_core::pipeline::{run_pipeline, PipelineConfig};
use ebr_core::retrieval::{build_indices, IvfConfig, ServiceHandle, Snapshot};
use ebr_core::synth::{generate_synthetic_corpus, write_corpus, SyntheticCorpusSpec};
use ebr_core::trainer::{
    init_model, run_cascade_on, train_stage, write_trace_csv, Activation, CascadeSchedule,
    LossConfig, Strategy, WARMUP_CHECKPOINT,
};

#[derive(Debug, Parser)]
#[command(
    name = "ebr",
    version,
    about = "Embedding-based product retrieval: data, training, evaluation, serving"
)]
pub struct Cli {
    /// Pipeline configuration (TOML). `EBR_*` environment variables override it; flags override both.
    #[arg(long, global = true, value_name = "F")]
    pub config: Option<PathBuf>,
    /// Global seed for every stochastic step.
    #[arg(long, global = true, value_name = "S")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic grocery corpus (catalog, engagement log, rater labels).
    GenCorpus(GenCorpusArgs),
    /// Build a warm-up or cascade training set.
    BuildDataset(BuildDatasetArgs),
    /// Train one stage, or the full two-stage schedule.
    Train(TrainArgs),
    /// Embed the catalog and write per-retailer indices.
    BuildIndex(BuildIndexArgs),
    /// Score a checkpoint against human labels.
    Evaluate(EvaluateArgs),
    /// Export per-label scores, and optionally a two-category separation report.
    ExportScores(ExportScoresArgs),
    /// Score the BM25 keyword baseline against human labels.
    BaselineBm25(Bm25Args),
    /// Serve POST /search and GET /healthz.
    Serve(ServeArgs),
    /// build-dataset → train → build-index → evaluate, with a hashed manifest.
    RunPipeline(RunPipelineArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub products: usize,
    #[arg(long, default_value_t = 2000)]
    pub queries: usize,
    /// Probability that a converted pair is cross-category.
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetMode {
    Warmup,
    Cascade,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long, value_enum)]
    pub mode: DatasetMode,
    #[arg(long)]
    pub engagement: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic fraction mixed into the warm-up set.
    #[arg(long)]
    pub synth_ratio: Option<f64>,
    #[arg(long)]
    pub k0: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub min_conversions: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Warmup,
    Cascade,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: TrainStage,
    /// Training pairs; the warm-up set for `--stage full`.
    #[arg(long)]
    pub data: PathBuf,
    /// Cascade pairs for `--stage full`.
    #[arg(long)]
    pub cascade_data: Option<PathBuf>,
    /// Starting checkpoint; required for `--stage cascade`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Loss flags apply to the trained stage (stage 2 for `full`).
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub lambda_neg: Option<f64>,
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Optimization flags apply to every trained stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<EvalMode>,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Raters that must agree for a label to count.
    #[arg(long)]
    pub agreement: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub labels: LabelArgs,
}

#[derive(Debug, Args)]
pub struct Bm25Args {
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
    #[command(flatten)]
    pub labels: LabelArgs,
}

#[derive(Debug, Args)]
pub struct ExportScoresArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub agreement: Option<usize>,
    /// CSV of `query,product_id,gain,score`.
    #[arg(long)]
    pub out: PathBuf,
    /// Separation report for this query between `--category-a` and `--category-b`.
    #[arg(long, requires_all = ["category_a", "category_b", "separation_out"])]
    pub query: Option<String>,
    #[arg(long)]
    pub category_a: Option<String>,
    #[arg(long)]
    pub category_b: Option<String>,
    #[arg(long)]
    pub separation_out: Option<PathBuf>,
    /// Adds per-product CTR to the separation report.
    #[arg(long)]
    pub engagement: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub indices: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Enables the keyword merge path.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub whitelist_m: Option<usize>,
    #[arg(long)]
    pub final_size: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub merge_keyword: bool,
    /// Approximate (IVF) search instead of an exact scan.
    #[arg(long)]
    pub ann: bool,
}

#[derive(Debug, Args)]
pub struct RunPipelineArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub engagement: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

/// Config file, then `EBR_*` environment, then `--seed`.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    cfg.propagate_seed();
    Ok(cfg)
}

fn pick(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.clone())
        .with_context(|| format!("`--{name}` is required (or set paths.{name} in the config)"))
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.with_context(|| format!("stage `{name}` failed"))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenCorpus(a) => stage("gen-corpus", gen_corpus(&cfg, a)),
        Command::BuildDataset(a) => stage("build-dataset", build_dataset(&cfg, a)),
        Command::Train(a) => stage("train", train(&cfg, a)),
        Command::BuildIndex(a) => stage("build-index", build_index(&cfg, a)),
        Command::Evaluate(a) => stage("evaluate", evaluate_cmd(&cfg, a)),
        Command::ExportScores(a) => stage("export-scores", export_scores(&cfg, a)),
        Command::BaselineBm25(a) => stage("baseline-bm25", baseline_bm25(&cfg, a)),
        Command::Serve(a) => stage("serve", serve(&cfg, a)),
        Command::RunPipeline(a) => pipeline(cfg, a),
    }
}

fn gen_corpus(cfg: &PipelineConfig, a: GenCorpusArgs) -> Result<()> {
    let spec = SyntheticCorpusSpec::grocery(a.products, a.queries).with_noise_rate(a.noise);
    let corpus = generate_synthetic_corpus(&spec, cfg.rng_seed)?;
    let files = write_corpus(&corpus, &a.out)?;
    println!(
        "{} products, {} engagement rows, {} rater rows -> {}",
        corpus.catalog.len(),
        corpus.engagement.len(),
        corpus.rater_rows.len(),
        a.out.display()
    );
    log::info!("wrote {:?}", files);
    Ok(())
}

fn load_inputs(
    catalog: &Path,
    engagement: &Path,
    min_conversions: u32,
) -> Result<(Catalog, Vec<QueryEngagement>)> {
    let catalog = Catalog::new(load_catalog(catalog)?)?;
    let records = load_engagement(engagement)?;
    Ok((catalog, QueryEngagement::group(&records, min_conversions)))
}

fn build_dataset(cfg: &PipelineConfig, a: BuildDatasetArgs) -> Result<()> {
    let mut cascade_cfg = cfg.cascade.clone();
    if let Some(k0) = a.k0 {
        cascade_cfg.k0_percent = k0;
    }
    if let Some(t) = a.theta {
        cascade_cfg.theta = t;
    }
    if let Some(m) = a.min_conversions {
        cascade_cfg.min_conversions = m;
    }
    cascade_cfg.validate()?;
    let mut synth_cfg = cfg.synthesis.clone();
    if let Some(r) = a.synth_ratio {
        synth_cfg.ratio = r;
    }
    synth_cfg.validate()?;
    let catalog_path = pick(&a.catalog, &cfg.paths.catalog, "catalog")?;
    let engagement_path = pick(&a.engagement, &cfg.paths.engagement, "engagement")?;
    let (catalog, engagement) =
        load_inputs(&catalog_path, &engagement_path, cascade_cfg.min_conversions)?;
    let pairs = match a.mode {
        DatasetMode::Warmup => {
            let base = build_warmup(&engagement, &catalog, &cascade_cfg, cfg.serialize)?;
            let n = synth_cfg.synthetic_count_for(base.len());
            let synth = synthesize_pairs(catalog.products(), &synth_cfg, n, cfg.serialize)?;
            assemble_dataset(base, synth, &synth_cfg)?
        }
        DatasetMode::Cascade => build_cascade(&engagement, &catalog, &cascade_cfg, cfg.serialize)?,
    };
    write_pairs(&a.out, &pairs)?;
    println!("{} pairs -> {}", pairs.len(), a.out.display());
    Ok(())
}

fn apply_train_flags(
    a: &TrainArgs,
    loss: &mut LossConfig,
    plans: &mut [&mut ebr_core::trainer::TrainConfig],
) {
    if let Some(s) = a.strategy {
        loss.strategy = s;
    }
    if let Some(x) = a.lambda_neg {
        loss.lambda_neg = x;
    }
    if let Some(x) = a.activation {
        loss.activation = x;
    }
    if let Some(x) = a.temperature {
        loss.temperature = x;
    }
    if a.k.is_some() {
        loss.k = a.k;
    }
    for t in plans.iter_mut() {
        if let Some(x) = a.epochs {
            t.epochs = x;
        }
        if let Some(x) = a.lr {
            t.learning_rate = x;
        }
        if let Some(x) = a.batch {
            t.batch_size = x;
        }
    }
}

fn train(cfg: &PipelineConfig, a: TrainArgs) -> Result<()> {
    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".trace.csv");
        PathBuf::from(s)
    });
    let data = read_pairs(&a.data)?;
    match a.stage {
        TrainStage::Warmup | TrainStage::Cascade => {
            let mut plan = if a.stage == TrainStage::Warmup {
                cfg.stage1.clone()
            } else {
                cfg.stage2.clone()
            };
            apply_train_flags(&a, &mut plan.loss, &mut [&mut plan.train]);
            let model = match (&a.init, a.stage) {
                (Some(p), _) => EmbeddingModel::load(p)?,
                (None, TrainStage::Warmup) => init_model(&[&data], &cfg.model, cfg.rng_seed),
                (None, _) => bail!("`--init` is required for the cascade stage"),
            };
            let model = if a.stage == TrainStage::Cascade && model.towers.is_tied() {
                let EmbeddingModel {
                    vocab,
                    towers,
                    stage,
                    serialize,
                } = model;
                EmbeddingModel {
                    vocab,
                    towers: towers.untie()?,
                    stage,
                    serialize,
                }
            } else {
                model
            };
            let (mut trained, trace) = train_stage(model, &data, &plan.loss, &plan.train)?;
            trained.stage = if a.stage == TrainStage::Warmup {
                Stage::Warmup
            } else {
                Stage::Cascade
            };
            trained.save(&a.out)?;
            write_trace_csv(&trace_path, &trace)?;
            println!("{} steps -> {}", trace.len(), a.out.display());
        }
        TrainStage::Full => {
            let cascade_path = a
                .cascade_data
                .clone()
                .context("`--cascade-data` is required for `--stage full`")?;
            let cascade = read_pairs(&cascade_path)?;
            let mut schedule = CascadeSchedule::new(&a.data, &cascade_path);
            schedule.stage1 = cfg.stage1.clone();
            schedule.stage2 = cfg.stage2.clone();
            apply_train_flags(
                &a,
                &mut schedule.stage2.loss,
                &mut [&mut schedule.stage1.train, &mut schedule.stage2.train],
            );
            schedule.model = cfg.model;
            schedule.init_seed = cfg.rng_seed;
            let outcome = run_cascade_on(&data, &cascade, &schedule)?;
            let warm_path = a
                .out
                .parent()
                .unwrap_or(Path::new("."))
                .join(WARMUP_CHECKPOINT);
            outcome.warmup_model.save(&warm_path)?;
            outcome.model.save(&a.out)?;
            let mut trace = outcome.stage1_trace.clone();
            trace.extend(outcome.stage2_trace.iter().cloned());
            write_trace_csv(&trace_path, &trace)?;
            println!(
                "warm-up -> {}, cascade -> {}",
                warm_path.display(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn build_index(cfg: &PipelineConfig, a: BuildIndexArgs) -> Result<()> {
    let model = EmbeddingModel::load(&a.ckpt)?;
    let catalog = Catalog::new(load_catalog(pick(
        &a.catalog,
        &cfg.paths.catalog,
        "catalog",
    )?)?)?;
    let summary = build_indices(
        &model,
        &catalog,
        &a.out,
        a.timestamp.unwrap_or(cfg.index.timestamp),
        cfg.exec,
    )?;
    println!(
        "{} retailer indices, {} embeddings -> {}",
        summary.index_files.len(),
        summary.total_embeddings,
        a.out.display()
    );
    Ok(())
}

fn eval_setup(
    cfg: &PipelineConfig,
    a: &LabelArgs,
) -> Result<(Catalog, Vec<ebr_core::corpus::HumanLabel>, EvalConfig)> {
    let catalog = Catalog::new(load_catalog(pick(
        &a.catalog,
        &cfg.paths.catalog,
        "catalog",
    )?)?)?;
    let labels = load_labels(
        pick(&a.labels, &cfg.paths.labels, "labels")?,
        a.agreement.unwrap_or(cfg.evaluate.agreement_threshold),
    )?;
    let ecfg = EvalConfig {
        ks: a.k.clone().unwrap_or_else(|| cfg.evaluate.ks.clone()),
        mode: a.mode.unwrap_or(cfg.evaluate.mode),
        exec: cfg.exec,
    };
    Ok((catalog, labels, ecfg))
}

fn print_report(r: &MetricReport) {
    let ks: Vec<String> = r
        .recall
        .iter()
        .map(|(k, v)| format!("NDCG@{k} {:.4}  RECALL@{k} {v:.4}", r.ndcg[k]))
        .collect();
    println!(
        "{}: {} queries ({} skipped)  {}  MRR {:.4}",
        r.scorer,
        r.query_count,
        r.skipped_queries,
        ks.join("  "),
        r.mrr
    );
}

fn finish_report(r: &MetricReport, out: &Option<PathBuf>) -> Result<()> {
    print_report(r);
    if let Some(p) = out {
        write_report(p, r)?;
    }
    Ok(())
}

fn evaluate_cmd(cfg: &PipelineConfig, a: EvaluateArgs) -> Result<()> {
    let model = EmbeddingModel::load(&a.ckpt)?;
    let (catalog, labels, ecfg) = eval_setup(cfg, &a.labels)?;
    let scorer = EmbeddingScorer::new(&model, &catalog, cfg.exec)?;
    finish_report(&evaluate(&scorer, &catalog, &labels, &ecfg)?, &a.labels.out)
}

fn baseline_bm25(cfg: &PipelineConfig, a: Bm25Args) -> Result<()> {
    let (catalog, labels, ecfg) = eval_setup(cfg, &a.labels)?;
    let scorer = Bm25Scorer::new(&catalog, Bm25Params { k1: a.k1, b: a.b })?;
    finish_report(&evaluate(&scorer, &catalog, &labels, &ecfg)?, &a.labels.out)
}

fn export_scores(cfg: &PipelineConfig, a: ExportScoresArgs) -> Result<()> {
    let model = EmbeddingModel::load(&a.ckpt)?;
    let catalog = Catalog::new(load_catalog(pick(
        &a.catalog,
        &cfg.paths.catalog,
        "catalog",
    )?)?)?;
    let labels = load_labels(
        pick(&a.labels, &cfg.paths.labels, "labels")?,
        a.agreement.unwrap_or(cfg.evaluate.agreement_threshold),
    )?;
    let n = export_score_distribution(&model, &catalog, &labels, &a.out, cfg.exec)?;
    println!("{n} rows -> {}", a.out.display());
    if let (Some(q), Some(ca), Some(cb), Some(out)) =
        (&a.query, &a.category_a, &a.category_b, &a.separation_out)
    {
        let engagement = a.engagement.as_ref().map(load_engagement).transpose()?;
        let report = category_separation_report(
            &model,
            q,
            ca,
            cb,
            catalog.products(),
            engagement.as_deref(),
        )?;
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
        println!(
            "`{q}`: AUC({ca} over {cb}) = {:.4} -> {}",
            report.auc,
            out.display()
        );
    }
    Ok(())
}

fn serve(cfg: &PipelineConfig, a: ServeArgs) -> Result<()> {
    let mut serve_cfg = cfg.serve;
    if let Some(x) = a.threshold {
        serve_cfg.score_threshold = x;
    }
    if let Some(x) = a.whitelist_m {
        serve_cfg.whitelist_top_m = x;
    }
    if let Some(x) = a.final_size {
        serve_cfg.final_size = x;
    }
    if let Some(x) = a.depth {
        serve_cfg.k = x;
    }
    serve_cfg.merge_keyword |= a.merge_keyword;
    serve_cfg.validate()?;
    log::info!("serve config: {serve_cfg:?}");
    let ann = a.ann.then(IvfConfig::default);
    let snapshot = Snapshot::load(&a.indices, &a.ckpt, a.catalog.as_deref(), ann.as_ref())?;
    let handle = Arc::new(ServiceHandle::new(snapshot));
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .context("bad --host/--port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::server::serve(
        addr,
        crate::server::router(handle, serve_cfg),
    ))?;
    Ok(())
}

fn pipeline(mut cfg: PipelineConfig, a: RunPipelineArgs) -> Result<()> {
    if let Some(p) = a.out {
        cfg.paths.output = p;
    }
    for (flag, slot) in [
        (a.catalog, &mut cfg.paths.catalog),
        (a.engagement, &mut cfg.paths.engagement),
        (a.labels, &mut cfg.paths.labels),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    // stage errors from the core already carry the stage name
    let outcome = run_pipeline(&cfg)?;
    for f in &outcome.manifest.files {
        println!("{:<16} {}  {}", f.role, &f.sha256[..12], f.path);
    }
    if let Some(r) = &outcome.report {
        print_report(r);
    }
    if let Some(r) = &outcome.bm25_report {
        print_report(r);
    }
    Ok(())
}
