use ebr_core::corpus::{Catalog, QueryEngagement};
use ebr_core::dataset::{build_cascade, CascadeConfig, SerializeOptions};
use ebr_core::encoder::ModelConfig;
use ebr_core::retrieval::{knn_exact_with, RetailerIndex};
use ebr_core::synth::{generate_synthetic_corpus, SyntheticCorpusSpec};
use ebr_core::trainer::{init_model, train_stage, Activation, LossConfig, Strategy, TrainConfig};
use ebr_core::ExecMode;

fn small() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        dim: 12,
        min_token_frequency: 1,
        embedding_init_scale: 0.5,
    }
}

#[test]
fn training_is_identical_across_exec_modes_and_reruns() {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::grocery(300, 120), 4).unwrap();
    let catalog = Catalog::new(corpus.catalog).unwrap();
    let grouped = QueryEngagement::group(&corpus.engagement, 2);
    let pairs = build_cascade(
        &grouped,
        &catalog,
        &CascadeConfig::default(),
        SerializeOptions::default(),
    )
    .unwrap();
    let losses = [
        LossConfig::all_in_batch(),
        LossConfig::self_adv_reweight(Activation::Sigmoid),
        LossConfig {
            strategy: Strategy::SelfAdvSampling,
            temperature: 2.0,
            ..LossConfig::default()
        },
    ];
    for loss in losses {
        let run = |exec: ExecMode| {
            let cfg = TrainConfig {
                epochs: 2,
                rng_seed: 13,
                exec,
                ..TrainConfig::from_scratch()
            };
            train_stage(init_model(&[&pairs], &small(), 1), &pairs, &loss, &cfg).unwrap()
        };
        let (seq, seq_trace) = run(ExecMode::Sequential);
        let (par, par_trace) = run(ExecMode::Parallel);
        let (again, _) = run(ExecMode::Parallel);
        assert_eq!(seq, par, "{:?}", loss.strategy);
        assert_eq!(seq_trace, par_trace);
        assert_eq!(par, again);
    }
}

#[test]
fn exact_knn_is_identical_across_exec_modes() {
    let rows = (0..500)
        .map(|i| {
            let e: Vec<f64> = (0..8)
                .map(|d| ((i * 31 + d * 7) % 17) as f64 / 17.0 - 0.5)
                .collect();
            (format!("p{i:03}"), e, "leaf".to_string(), true)
        })
        .collect();
    let index = RetailerIndex::new("r", 0, 8, rows).unwrap();
    let q = vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.4, 0.2, 0.1];
    assert_eq!(
        knn_exact_with(&index, &q, 50, ExecMode::Sequential).unwrap(),
        knn_exact_with(&index, &q, 50, ExecMode::Parallel).unwrap()
    );
}
