use ebr_core::pipeline::{run_pipeline, sha256_file, PipelineConfig, MANIFEST_FILE};
use ebr_core::synth::{generate_synthetic_corpus, write_corpus, SyntheticCorpusSpec};
use ebr_core::trainer::TrainConfig;

fn quick_config(dir: &std::path::Path) -> PipelineConfig {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::grocery(400, 150), 3).unwrap();
    let files = write_corpus(&corpus, dir.join("corpus")).unwrap();
    let mut cfg = PipelineConfig {
        rng_seed: 3,
        ..PipelineConfig::default()
    };
    cfg.model.dim = 16;
    cfg.model.hidden = 16;
    let train = TrainConfig {
        epochs: 2,
        ..TrainConfig::from_scratch()
    };
    cfg.stage1.train = train.clone();
    cfg.stage2.train = train;
    cfg.paths.catalog = Some(files.catalog);
    cfg.paths.engagement = Some(files.engagement);
    cfg.paths.labels = Some(files.labels);
    cfg.paths.output = dir.join("out");
    cfg.propagate_seed();
    cfg
}

#[test]
fn manifest_lists_every_artifact_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let outcome = run_pipeline(&cfg).unwrap();
    let m = &outcome.manifest;
    assert_eq!(m.rng_seed, 3);
    assert_eq!(m.role("warmup_dataset").len(), 1);
    assert_eq!(m.role("cascade_dataset").len(), 1);
    assert_eq!(m.role("checkpoint").len(), 2);
    assert_eq!(m.role("index").len(), 3, "one index per retailer");
    assert_eq!(m.role("sidecar").len(), 1);
    assert!(!m.role("report").is_empty());
    for f in &m.files {
        let path = cfg.paths.output.join(&f.path);
        let (bytes, hash) = sha256_file(&path).unwrap();
        assert_eq!(
            (bytes, hash.as_str()),
            (f.bytes, f.sha256.as_str()),
            "{}",
            f.path
        );
    }
    let on_disk: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(cfg.paths.output.join(MANIFEST_FILE)).unwrap(),
    )
    .unwrap();
    assert_eq!(on_disk["files"].as_array().unwrap().len(), m.files.len());
    let report = outcome.report.unwrap();
    for v in report.ndcg.values().chain(report.recall.values()) {
        assert!((0.0..=1.0).contains(v));
    }
}

#[test]
fn rerun_reproduces_every_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let first = run_pipeline(&cfg).unwrap().manifest;
    let second = run_pipeline(&cfg).unwrap().manifest;
    assert_eq!(first, second);
}

#[test]
fn failing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    let missing = dir.path().join("missing.tsv");
    cfg.paths.engagement = Some(missing);
    let err = run_pipeline(&cfg).unwrap_err().to_string();
    assert!(
        err.contains("`config`") && err.contains("paths.engagement"),
        "{err}"
    );

    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "milk\tP00001\tnot-a-number\t4\n").unwrap();
    cfg.paths.engagement = Some(bad);
    let err = run_pipeline(&cfg).unwrap_err().to_string();
    assert!(err.contains("`build-dataset`"), "{err}");
}
