use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ebr_core::corpus::{Catalog, QueryEngagement};
use ebr_core::dataset::{build_cascade, CascadeConfig, SerializeOptions};
use ebr_core::encoder::ModelConfig;
use ebr_core::retrieval::{knn_exact_with, RetailerIndex};
use ebr_core::synth::{generate_synthetic_corpus, SyntheticCorpusSpec};
use ebr_core::trainer::{init_model, train_stage, LossConfig, TrainConfig};
use ebr_core::ExecMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn bench_modes(c: &mut Criterion) {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::grocery(2000, 600), 0).unwrap();
    let catalog = Catalog::new(corpus.catalog).unwrap();
    let grouped = QueryEngagement::group(&corpus.engagement, 2);
    let pairs = build_cascade(
        &grouped,
        &catalog,
        &CascadeConfig::default(),
        SerializeOptions::default(),
    )
    .unwrap();
    let model = init_model(&[&pairs], &ModelConfig::default(), 0);

    let mut group = c.benchmark_group("embed_catalog");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.embed_products(catalog.products(), mode).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, mode) in MODES {
        let cfg = TrainConfig {
            epochs: 1,
            exec: mode,
            ..TrainConfig::from_scratch()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                train_stage(model.clone(), &pairs, &LossConfig::all_in_batch(), &cfg).unwrap()
            })
        });
    }
    group.finish();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 100;
    let rows = (0..20_000)
        .map(|i| {
            let e: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (format!("p{i:05}"), e, "leaf".to_string(), true)
        })
        .collect();
    let index = RetailerIndex::new("r", 0, dim, rows).unwrap();
    let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut group = c.benchmark_group("knn_exact_20k");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| knn_exact_with(&index, &query, 100, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
