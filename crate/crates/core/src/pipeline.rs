//! Declarative pipeline configuration and the end-to-end orchestrator:
//! build-dataset → train (cascade) → build-index → evaluate, plus a hashed manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_catalog, load_engagement, load_labels, Catalog, QueryEngagement};
use crate::dataset::{
    assemble_dataset, build_cascade, build_warmup, synthesize_pairs, write_pairs, CascadeConfig,
    SerializeOptions, SynthesisConfig, TrainingPair,
};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate, write_report, Bm25Scorer, EmbeddingScorer, EvalConfig, EvalMode, MetricReport,
    DEFAULT_KS,
};
use crate::exec::ExecMode;
use crate::retrieval::{build_indices, ServeConfig};
use crate::trainer::{
    run_cascade_on, write_trace_csv, Activation, CascadeSchedule, LossConfig, StagePlan,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub catalog: Option<PathBuf>,
    pub engagement: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Working directory for every artifact.
    pub output: PathBuf,
    /// Defaults to `<output>/checkpoints`.
    pub checkpoints: Option<PathBuf>,
    /// Defaults to `<output>/indices`.
    pub indices: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            catalog: None,
            engagement: None,
            labels: None,
            output: PathBuf::from("out"),
            checkpoints: None,
            indices: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSettings {
    pub enabled: bool,
    pub mode: EvalMode,
    pub ks: Vec<usize>,
    /// Raters that must agree for a label to count.
    pub agreement_threshold: usize,
    /// Also score the keyword baseline into `report.bm25.json`.
    pub bm25_baseline: bool,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: EvalMode::Retrieval,
            ks: DEFAULT_KS.to_vec(),
            agreement_threshold: 2,
            bm25_baseline: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexSettings {
    /// Written into every index header; fixed so rebuilds are byte-identical.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Seeds every stochastic component: synthesis, initialization and both stages' shuffles.
    pub rng_seed: u64,
    pub exec: ExecMode,
    pub paths: PathsConfig,
    pub cascade: CascadeConfig,
    pub synthesis: SynthesisConfig,
    pub serialize: SerializeOptions,
    pub model: ModelConfig,
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    pub evaluate: EvaluateSettings,
    pub index: IndexSettings,
    pub serve: ServeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            exec: ExecMode::default(),
            paths: PathsConfig::default(),
            cascade: CascadeConfig::default(),
            synthesis: SynthesisConfig::default(),
            serialize: SerializeOptions::default(),
            model: ModelConfig::default(),
            stage1: StagePlan {
                loss: LossConfig::all_in_batch(),
                train: TrainConfig::from_scratch(),
            },
            stage2: StagePlan {
                loss: LossConfig::self_adv_reweight(Activation::Identity),
                train: TrainConfig::from_scratch(),
            },
            evaluate: EvaluateSettings::default(),
            index: IndexSettings::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Environment variables consulted by [`PipelineConfig::apply_env`].
pub const ENV_OVERRIDES: &[&str] = &[
    "EBR_SEED",
    "EBR_CATALOG",
    "EBR_ENGAGEMENT",
    "EBR_LABELS",
    "EBR_OUTPUT",
];

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    /// Parses a TOML document layered over the defaults: any key may be omitted, at any depth.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base =
            toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        base.try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `EBR_*` overrides looked up through `var` (pass `|k| std::env::var(k).ok()`).
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = var("EBR_SEED") {
            self.rng_seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("EBR_SEED is not an integer: `{s}`")))?;
        }
        for (key, slot) in [
            ("EBR_CATALOG", &mut self.paths.catalog),
            ("EBR_ENGAGEMENT", &mut self.paths.engagement),
            ("EBR_LABELS", &mut self.paths.labels),
        ] {
            if let Some(v) = var(key) {
                *slot = Some(PathBuf::from(v));
            }
        }
        if let Some(v) = var("EBR_OUTPUT") {
            self.paths.output = PathBuf::from(v);
        }
        Ok(())
    }

    /// Copies the global seed into every stochastic component.
    pub fn propagate_seed(&mut self) {
        self.synthesis.rng_seed = self.rng_seed;
        self.stage1.train.rng_seed = self.rng_seed;
        self.stage2.train.rng_seed = self.rng_seed;
        self.stage1.train.exec = self.exec;
        self.stage2.train.exec = self.exec;
    }

    pub fn validate(&self) -> Result<()> {
        let need = |p: &Option<PathBuf>, field: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("`{field}` is required"))),
                Some(p) if !p.exists() => Err(Error::Config(format!(
                    "`{field}` does not exist: {}",
                    p.display()
                ))),
                Some(_) => Ok(()),
            }
        };
        need(&self.paths.catalog, "paths.catalog")?;
        need(&self.paths.engagement, "paths.engagement")?;
        if self.evaluate.enabled {
            need(&self.paths.labels, "paths.labels")?;
            if self.evaluate.ks.is_empty() || self.evaluate.ks.contains(&0) {
                return Err(Error::Config(
                    "`evaluate.ks` must be non-empty and positive".into(),
                ));
            }
        }
        self.cascade.validate()?;
        self.synthesis.validate()?;
        for plan in [&self.stage1, &self.stage2] {
            plan.train.validate()?;
            plan.loss.validate(plan.train.batch_size)?;
        }
        self.serve.validate()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoints
            .clone()
            .unwrap_or_else(|| self.paths.output.join("checkpoints"))
    }

    pub fn index_dir(&self) -> PathBuf {
        self.paths
            .indices
            .clone()
            .unwrap_or_else(|| self.paths.output.join("indices"))
    }
}

impl PathsConfig {
    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for p in [
            &mut self.catalog,
            &mut self.engagement,
            &mut self.labels,
            &mut self.checkpoints,
            &mut self.indices,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output);
    }
}

pub const WARMUP_PAIRS: &str = "warmup.pairs.jsonl";
pub const CASCADE_PAIRS: &str = "cascade.pairs.jsonl";
pub const STAGE1_TRACE: &str = "stage1.trace.csv";
pub const STAGE2_TRACE: &str = "stage2.trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const BM25_REPORT_FILE: &str = "report.bm25.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    /// Relative to the output directory when inside it.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub rng_seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn role(&self, role: &str) -> Vec<&ManifestEntry> {
        self.files.iter().filter(|f| f.role == role).collect()
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<(u64, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub report: Option<MetricReport>,
    pub bm25_report: Option<MetricReport>,
}

/// Warm-up (engagement plus catalog synthesis) and cascade training sets.
pub fn build_datasets(
    engagement: &[QueryEngagement],
    catalog: &Catalog,
    cfg: &PipelineConfig,
) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    let base = build_warmup(engagement, catalog, &cfg.cascade, cfg.serialize)?;
    let n = cfg.synthesis.synthetic_count_for(base.len());
    let synth = synthesize_pairs(catalog.products(), &cfg.synthesis, n, cfg.serialize)?;
    let warm = assemble_dataset(base, synth, &cfg.synthesis)?;
    let cascade = build_cascade(engagement, catalog, &cfg.cascade, cfg.serialize)?;
    if cascade.is_empty() {
        return Err(Error::Empty("cascade dataset"));
    }
    Ok((warm, cascade))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every stage in order and writes `manifest.json` into the output directory.
/// The configuration is used as given; call [`PipelineConfig::propagate_seed`] first to
/// derive component seeds from the global one.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    stage("config", cfg.validate())?;
    let out = cfg.paths.output.clone();
    stage(
        "config",
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)),
    )?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();

    // build-dataset
    let (catalog, warm, cascade) = stage(
        "build-dataset",
        (|| {
            let catalog = Catalog::new(load_catalog(
                cfg.paths.catalog.as_ref().expect("validated"),
            )?)?;
            let records = load_engagement(cfg.paths.engagement.as_ref().expect("validated"))?;
            let engagement = QueryEngagement::group(&records, cfg.cascade.min_conversions);
            let (warm, cascade) = build_datasets(&engagement, &catalog, cfg)?;
            write_pairs(out.join(WARMUP_PAIRS), &warm)?;
            write_pairs(out.join(CASCADE_PAIRS), &cascade)?;
            Ok((catalog, warm, cascade))
        })(),
    )?;
    log::info!(
        "datasets: {} warm-up pairs, {} cascade pairs",
        warm.len(),
        cascade.len()
    );
    files.push(("warmup_dataset".into(), out.join(WARMUP_PAIRS)));
    files.push(("cascade_dataset".into(), out.join(CASCADE_PAIRS)));

    // train
    let outcome = stage(
        "train",
        (|| {
            let mut schedule =
                CascadeSchedule::new(out.join(WARMUP_PAIRS), out.join(CASCADE_PAIRS));
            schedule.stage1 = cfg.stage1.clone();
            schedule.stage2 = cfg.stage2.clone();
            schedule.model = cfg.model;
            schedule.init_seed = cfg.rng_seed;
            schedule.checkpoint_dir = Some(cfg.checkpoint_dir());
            let outcome = run_cascade_on(&warm, &cascade, &schedule)?;
            write_trace_csv(out.join(STAGE1_TRACE), &outcome.stage1_trace)?;
            write_trace_csv(out.join(STAGE2_TRACE), &outcome.stage2_trace)?;
            Ok(outcome)
        })(),
    )?;
    for c in &outcome.checkpoints {
        files.push(("checkpoint".into(), c.clone()));
    }
    files.push(("trace".into(), out.join(STAGE1_TRACE)));
    files.push(("trace".into(), out.join(STAGE2_TRACE)));

    // build-index
    let summary = stage(
        "build-index",
        build_indices(
            &outcome.model,
            &catalog,
            cfg.index_dir(),
            cfg.index.timestamp,
            cfg.exec,
        ),
    )?;
    for f in &summary.index_files {
        files.push(("index".into(), f.clone()));
    }
    files.push(("sidecar".into(), summary.sidecar.clone()));

    // evaluate
    let (mut report, mut bm25_report) = (None, None);
    if cfg.evaluate.enabled {
        let (r, b) = stage(
            "evaluate",
            (|| {
                let labels = load_labels(
                    cfg.paths.labels.as_ref().expect("validated"),
                    cfg.evaluate.agreement_threshold,
                )?;
                let ecfg = EvalConfig {
                    ks: cfg.evaluate.ks.clone(),
                    mode: cfg.evaluate.mode,
                    exec: cfg.exec,
                };
                let scorer = EmbeddingScorer::new(&outcome.model, &catalog, cfg.exec)?;
                let report = evaluate(&scorer, &catalog, &labels, &ecfg)?;
                write_report(out.join(REPORT_FILE), &report)?;
                let bm25 = if cfg.evaluate.bm25_baseline {
                    let r = evaluate(
                        &Bm25Scorer::new(&catalog, Default::default())?,
                        &catalog,
                        &labels,
                        &ecfg,
                    )?;
                    write_report(out.join(BM25_REPORT_FILE), &r)?;
                    Some(r)
                } else {
                    None
                };
                Ok((report, bm25))
            })(),
        )?;
        files.push(("report".into(), out.join(REPORT_FILE)));
        if b.is_some() {
            files.push(("report".into(), out.join(BM25_REPORT_FILE)));
        }
        report = Some(r);
        bm25_report = b;
    }

    let manifest = stage(
        "manifest",
        (|| {
            let mut entries = Vec::new();
            for (role, path) in &files {
                let (bytes, sha256) = sha256_file(path)?;
                let shown = path.strip_prefix(&out).unwrap_or(path);
                entries.push(ManifestEntry {
                    role: role.clone(),
                    path: shown.to_string_lossy().replace('\\', "/"),
                    bytes,
                    sha256,
                });
            }
            let manifest = Manifest {
                rng_seed: cfg.rng_seed,
                files: entries,
            };
            let path = out.join(MANIFEST_FILE);
            let mut text = serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(manifest)
        })(),
    )?;

    Ok(PipelineOutcome {
        manifest,
        report,
        bm25_report,
    })
}
