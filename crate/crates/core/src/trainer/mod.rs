//! Two-tower training: loss variants, the optimizer loop, and the tied-then-untied cascade
//! schedule.

pub mod loss;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    bce, inclusion_probabilities, loss_all_inbatch, loss_random_k, loss_reweighted_with,
    loss_selfadv_reweight, loss_selfadv_sampling, loss_with_plan, sigmoid, Activation,
    BatchEmbeddings, LossConfig, LossOutput, NegativePlan, Strategy,
};
pub use optim::{AdamParams, OptimizerKind};

use crate::dataset::{read_pairs, TrainingPair};
use crate::encoder::{tokenize, EmbeddingModel, ModelConfig, Stage, TowerGrads, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use optim::TowerOptimizer;

/// Examples per backward work unit; fixed so reductions do not depend on the thread count.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Fraction of all steps over which the learning rate ramps linearly from 0.
    pub warmup_fraction: f64,
    pub rng_seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default)]
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1.6e-4,
            epochs: 1,
            warmup_fraction: 0.0,
            rng_seed: 0,
            optimizer: OptimizerKind::AdamLike,
            adam: AdamParams::default(),
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for an encoder trained from random initialization rather than fine-tuned
    /// from a pretrained checkpoint: more epochs, smaller batches, a larger step and a short
    /// ramp.
    pub fn from_scratch() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-2,
            epochs: 10,
            warmup_fraction: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub pos_loss: f64,
    pub neg_loss: f64,
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "step,loss,pos_loss,neg_loss").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.pos_loss, r.neg_loss).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Mean step loss per epoch.
pub fn epoch_losses(trace: &[TraceRow]) -> Vec<f64> {
    let epochs = trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let rows: Vec<f64> = trace
                .iter()
                .filter(|r| r.epoch == e)
                .map(|r| r.loss)
                .collect();
            rows.iter().sum::<f64>() / rows.len().max(1) as f64
        })
        .collect()
}

struct Example {
    query: Vec<u32>,
    product: Vec<u32>,
    weight: f64,
}

fn tokenize_pairs(
    vocab: &Vocabulary,
    pairs: &[TrainingPair],
    mode: ExecMode,
) -> Result<Vec<Example>> {
    exec::map(mode, pairs, |p| {
        let query = tokenize(&p.query_text, vocab);
        let product = tokenize(&p.product_text, vocab);
        if query.is_empty() || product.is_empty() {
            return Err(Error::Invariant(format!(
                "pair for product `{}` tokenizes to nothing",
                p.product_id
            )));
        }
        Ok(Example {
            query,
            product,
            weight: f64::from(p.multiplicity.max(1)),
        })
    })
    .into_iter()
    .collect()
}

/// Trains `model` in place over shuffled epochs of `pairs`.
///
/// Pair multiplicity weights the positive term. A trailing batch of one example is skipped.
/// Results are bit-identical for a given seed regardless of [`ExecMode`].
pub fn train_stage(
    mut model: EmbeddingModel,
    pairs: &[TrainingPair],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(EmbeddingModel, Vec<TraceRow>)> {
    cfg.validate()?;
    if pairs.len() < 2 {
        return Err(Error::Empty("training pairs (need at least 2)"));
    }
    let mode = cfg.exec;
    let examples = tokenize_pairs(&model.vocab, pairs, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;

    let mut optimizers: Vec<TowerOptimizer> = model
        .towers
        .towers_mut()
        .into_iter()
        .map(|t| TowerOptimizer::new(cfg.optimizer, cfg.adam, t))
        .collect();

    let mut trace = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(cfg.batch_size) {
            if batch_ids.len() < 2 {
                continue;
            }
            let lr = if step < warmup_steps {
                cfg.learning_rate * (step + 1) as f64 / warmup_steps as f64
            } else {
                cfg.learning_rate
            };
            let mut batch_loss = *loss_cfg;
            if let Some(k) = batch_loss.k {
                batch_loss.k = Some(k.min(batch_ids.len() - 1));
            }
            let out = train_step(
                &mut model,
                &examples,
                batch_ids,
                &batch_loss,
                &mut optimizers,
                lr,
                &mut rng,
                mode,
            )?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            trace.push(TraceRow {
                step,
                epoch,
                loss: out.loss,
                pos_loss: out.pos_loss,
                neg_loss: out.neg_loss,
            });
            step += 1;
        }
    }
    Ok((model, trace))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut EmbeddingModel,
    examples: &[Example],
    batch_ids: &[usize],
    loss_cfg: &LossConfig,
    optimizers: &mut [TowerOptimizer],
    lr: f64,
    rng: &mut ChaCha8Rng,
    mode: ExecMode,
) -> Result<LossOutput> {
    let towers = &model.towers;
    let dim = towers.dim();
    let acts = exec::map(mode, batch_ids, |&i| {
        let e = &examples[i];
        Ok((
            towers.query_tower().forward(&e.query)?,
            towers.product_tower().forward(&e.product)?,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut queries = Vec::with_capacity(batch_ids.len() * dim);
    let mut products = Vec::with_capacity(batch_ids.len() * dim);
    for (qa, pa) in &acts {
        queries.extend_from_slice(&qa.output);
        products.extend_from_slice(&pa.output);
    }
    let weights = batch_ids.iter().map(|&i| examples[i].weight).collect();
    let batch = BatchEmbeddings::new(dim, queries, products, weights)?;
    let out = loss_cfg.compute(&batch, rng, mode)?;
    if !out.loss.is_finite() {
        return Ok(out);
    }

    let tied = towers.is_tied();
    let chunks = batch_ids.len().div_ceil(GRAD_CHUNK);
    let partials = exec::map_range(mode, chunks, |c| {
        let q_tower = towers.query_tower();
        let p_tower = towers.product_tower();
        let mut gq = TowerGrads::for_tower(q_tower);
        let mut gp = (!tied).then(|| TowerGrads::for_tower(p_tower));
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(batch_ids.len());
        for k in lo..hi {
            let e = &examples[batch_ids[k]];
            let (qa, pa) = &acts[k];
            q_tower.backward(
                &e.query,
                qa,
                &out.grad_queries[k * dim..(k + 1) * dim],
                &mut gq,
            );
            let target = match gp.as_mut() {
                Some(g) => g,
                None => &mut gq,
            };
            p_tower.backward(
                &e.product,
                pa,
                &out.grad_products[k * dim..(k + 1) * dim],
                target,
            );
        }
        (gq, gp)
    });
    let mut iter = partials.into_iter();
    let (mut gq, mut gp) = iter.next().expect("batch has at least one chunk");
    for (q, p) in iter {
        gq.merge(&q);
        if let (Some(acc), Some(p)) = (gp.as_mut(), p.as_ref()) {
            acc.merge(p);
        }
    }

    let grads: Vec<&TowerGrads> = std::iter::once(&gq).chain(gp.as_ref()).collect();
    for ((tower, opt), g) in model
        .towers
        .towers_mut()
        .into_iter()
        .zip(optimizers.iter_mut())
        .zip(grads)
    {
        opt.step(tower, g, lr);
    }
    Ok(out)
}

/// Vocabulary from the query and product texts of the given pair sets.
pub fn build_vocabulary(pair_sets: &[&[TrainingPair]], min_frequency: usize) -> Vocabulary {
    let texts = pair_sets
        .iter()
        .flat_map(|set| set.iter())
        .flat_map(|p| [p.query_text.as_str(), p.product_text.as_str()]);
    Vocabulary::build(texts, min_frequency)
}

/// Fresh tied model with a vocabulary drawn from `pair_sets`.
pub fn init_model(pair_sets: &[&[TrainingPair]], cfg: &ModelConfig, seed: u64) -> EmbeddingModel {
    let vocab = build_vocabulary(pair_sets, cfg.min_token_frequency);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingModel::new_random(vocab, cfg, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeSchedule {
    pub warmup_data: PathBuf,
    pub cascade_data: PathBuf,
    /// Tied towers, warm-up data.
    pub stage1: StagePlan,
    /// Untied towers, cascade data.
    pub stage2: StagePlan,
    pub model: ModelConfig,
    pub init_seed: u64,
    /// When set, `warmup.ckpt.json` and `cascade.ckpt.json` are written here.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl CascadeSchedule {
    pub fn new(warmup_data: impl Into<PathBuf>, cascade_data: impl Into<PathBuf>) -> Self {
        Self {
            warmup_data: warmup_data.into(),
            cascade_data: cascade_data.into(),
            stage1: StagePlan {
                loss: LossConfig::all_in_batch(),
                train: TrainConfig::default(),
            },
            stage2: StagePlan {
                loss: LossConfig::self_adv_reweight(Activation::Identity),
                train: TrainConfig::default(),
            },
            model: ModelConfig::default(),
            init_seed: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub warmup_model: EmbeddingModel,
    pub model: EmbeddingModel,
    pub stage1_trace: Vec<TraceRow>,
    pub stage2_trace: Vec<TraceRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub const WARMUP_CHECKPOINT: &str = "warmup.ckpt.json";
pub const CASCADE_CHECKPOINT: &str = "cascade.ckpt.json";

pub fn run_cascade(schedule: &CascadeSchedule) -> Result<CascadeOutcome> {
    let warm = read_pairs(&schedule.warmup_data)?;
    let cascade = read_pairs(&schedule.cascade_data)?;
    run_cascade_on(&warm, &cascade, schedule)
}

/// The cascade schedule over in-memory datasets (the schedule's data paths are ignored).
pub fn run_cascade_on(
    warm: &[TrainingPair],
    cascade: &[TrainingPair],
    schedule: &CascadeSchedule,
) -> Result<CascadeOutcome> {
    let init = init_model(&[warm, cascade], &schedule.model, schedule.init_seed);
    let (mut warmup_model, stage1_trace) =
        train_stage(init, warm, &schedule.stage1.loss, &schedule.stage1.train)?;
    warmup_model.stage = Stage::Warmup;

    let mut checkpoints = Vec::new();
    if let Some(dir) = &schedule.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(WARMUP_CHECKPOINT);
        warmup_model.save(&path)?;
        checkpoints.push(path);
    }

    let mut untied = warmup_model.clone();
    untied.towers = untied.towers.untie()?;
    let (mut model, stage2_trace) = if schedule.stage2.train.epochs == 0 || cascade.len() < 2 {
        (untied, Vec::new())
    } else {
        train_stage(
            untied,
            cascade,
            &schedule.stage2.loss,
            &schedule.stage2.train,
        )?
    };
    model.stage = Stage::Cascade;
    if let Some(dir) = &schedule.checkpoint_dir {
        let path = dir.join(CASCADE_CHECKPOINT);
        model.save(&path)?;
        checkpoints.push(path);
    }
    Ok(CascadeOutcome {
        warmup_model,
        model,
        stage1_trace,
        stage2_trace,
        checkpoints,
    })
}

/// One training stage on a fresh tied model (the ablation baselines).
pub fn train_single_stage(
    pairs: &[TrainingPair],
    plan: &StagePlan,
    model_cfg: &ModelConfig,
    init_seed: u64,
) -> Result<(EmbeddingModel, Vec<TraceRow>)> {
    let init = init_model(&[pairs], model_cfg, init_seed);
    let (mut model, trace) = train_stage(init, pairs, &plan.loss, &plan.train)?;
    model.stage = Stage::Cascade;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PairSource;

    fn pair(q: &str, p: &str, id: &str) -> TrainingPair {
        TrainingPair {
            query_text: format!("[QRY] {q}"),
            product_text: format!("[PN] {p} [PBN]  [PCS] food [PAS] "),
            product_id: id.into(),
            source: PairSource::Engagement,
            multiplicity: 1,
        }
    }

    fn toy() -> Vec<TrainingPair> {
        vec![
            pair("milk", "whole milk", "m"),
            pair("wine", "red wine", "w"),
            pair("milk", "whole milk", "m"),
            pair("wine", "red wine", "w"),
        ]
    }

    fn small_model(pairs: &[TrainingPair]) -> EmbeddingModel {
        let cfg = ModelConfig {
            hidden: 8,
            dim: 6,
            min_token_frequency: 1,
            embedding_init_scale: 0.5,
        };
        init_model(&[pairs], &cfg, 7)
    }

    fn sgd(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: lr,
            epochs,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let pairs = toy()[..2].to_vec();
        let model = small_model(&pairs);
        for opt in [OptimizerKind::Sgd, OptimizerKind::AdamLike] {
            let cfg = TrainConfig {
                optimizer: opt,
                ..sgd(0.0, 1)
            };
            let (trained, trace) =
                train_stage(model.clone(), &pairs, &LossConfig::default(), &cfg).unwrap();
            assert_eq!(trained, model);
            assert_eq!(trace.len(), 1);
        }
    }

    #[test]
    fn seeded_training_is_reproducible_across_exec_modes() {
        let pairs = toy();
        let model = small_model(&pairs);
        let loss = LossConfig {
            strategy: Strategy::RandomK,
            k: Some(2),
            ..LossConfig::default()
        };
        let mut cfg = TrainConfig {
            batch_size: 3,
            learning_rate: 0.05,
            epochs: 3,
            rng_seed: 42,
            ..TrainConfig::default()
        };
        let a = train_stage(model.clone(), &pairs, &loss, &cfg).unwrap();
        let b = train_stage(model.clone(), &pairs, &loss, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        cfg.exec = ExecMode::Sequential;
        let c = train_stage(model, &pairs, &loss, &cfg).unwrap();
        assert_eq!(a.0, c.0);
    }

    #[test]
    fn toy_task_separates_positives() {
        let pairs = toy();
        let model = small_model(&pairs);
        let (trained, trace) =
            train_stage(model, &pairs, &LossConfig::default(), &sgd(1e-2, 300)).unwrap();
        let losses = epoch_losses(&trace);
        assert!(
            losses.windows(2).all(|w| w[1] <= w[0] + 1e-12),
            "loss rose: {losses:?}"
        );
        let s = |q: &str, p: &str| {
            crate::encoder::dot(
                &trained.embed_query_text(&format!("[QRY] {q}")).unwrap(),
                &trained
                    .embed_product_text(&format!("[PN] {p} [PBN]  [PCS] food [PAS] "))
                    .unwrap(),
            )
        };
        assert!(s("milk", "whole milk") > s("milk", "red wine"));
        assert!(s("wine", "red wine") > s("wine", "whole milk"));
    }

    #[test]
    fn cascade_with_empty_second_stage_is_an_untied_copy() {
        let pairs = toy();
        let mut schedule = CascadeSchedule::new("unused", "unused");
        schedule.model = ModelConfig {
            hidden: 8,
            dim: 6,
            min_token_frequency: 1,
            embedding_init_scale: 0.5,
        };
        schedule.stage1.train = TrainConfig {
            batch_size: 4,
            learning_rate: 0.01,
            epochs: 2,
            ..TrainConfig::default()
        };
        schedule.stage2.train = TrainConfig {
            epochs: 0,
            ..schedule.stage1.train.clone()
        };
        let dir = tempfile::tempdir().unwrap();
        schedule.checkpoint_dir = Some(dir.path().to_path_buf());
        let out = run_cascade_on(&pairs, &pairs, &schedule).unwrap();
        assert!(out.warmup_model.towers.is_tied());
        assert!(!out.model.towers.is_tied());
        assert_eq!(out.model.stage, Stage::Cascade);
        let text = "[QRY] milk";
        assert_eq!(
            out.model.embed_query_text(text).unwrap(),
            out.warmup_model.embed_query_text(text).unwrap()
        );
        assert_eq!(
            out.model.embed_product_text(text).unwrap(),
            out.warmup_model.embed_product_text(text).unwrap()
        );
        assert_eq!(out.checkpoints.len(), 2);
        let reloaded = EmbeddingModel::load(dir.path().join(CASCADE_CHECKPOINT)).unwrap();
        assert_eq!(reloaded, out.model);
    }

    #[test]
    fn stage_two_starts_where_stage_one_ended() {
        // with a zero learning rate in stage 2 the first stage-2 forward pass reproduces stage 1
        let pairs = toy();
        let mut schedule = CascadeSchedule::new("unused", "unused");
        schedule.model = ModelConfig {
            hidden: 8,
            dim: 6,
            min_token_frequency: 1,
            embedding_init_scale: 0.5,
        };
        schedule.stage1.train = TrainConfig {
            batch_size: 4,
            learning_rate: 0.01,
            epochs: 2,
            ..TrainConfig::default()
        };
        schedule.stage2.train = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..schedule.stage1.train.clone()
        };
        let out = run_cascade_on(&pairs, &pairs, &schedule).unwrap();
        let stage1_final = out.stage1_trace.len();
        assert_eq!(stage1_final, 2);
        let warm = &out.warmup_model;
        for p in &pairs {
            assert_eq!(
                out.model.embed_query_text(&p.query_text).unwrap(),
                warm.embed_query_text(&p.query_text).unwrap()
            );
            assert_eq!(
                out.model.embed_product_text(&p.product_text).unwrap(),
                warm.embed_product_text(&p.product_text).unwrap()
            );
        }
    }

    #[test]
    fn invalid_inputs() {
        let pairs = toy();
        let model = small_model(&pairs);
        assert!(train_stage(
            model.clone(),
            &pairs[..1],
            &LossConfig::default(),
            &sgd(0.1, 1)
        )
        .is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..sgd(0.1, 1)
        };
        assert!(train_stage(model, &pairs, &LossConfig::default(), &bad).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(
            &path,
            &[TraceRow {
                step: 0,
                epoch: 0,
                loss: 1.5,
                pos_loss: 0.5,
                neg_loss: 1.0,
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "step,loss,pos_loss,neg_loss\n0,1.5,0.5,1\n"
        );
    }
}
