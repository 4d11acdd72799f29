use std::path::Path;
use std::process::{Command, Output};

fn ebr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebr"))
        .current_dir(dir)
        .env_remove("EBR_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ebr(dir, args);
    assert!(
        out.status.success(),
        "ebr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--products", "300", "--queries", "120"];

#[test]
fn step_by_step_workflow() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(
        p,
        &[&["gen-corpus", "--out", "corpus", "--seed", "5"], SMALL].concat(),
    );
    for f in ["catalog.jsonl", "engagement.tsv", "labels.jsonl"] {
        assert!(p.join("corpus").join(f).exists());
    }
    let inputs = [
        "--catalog",
        "corpus/catalog.jsonl",
        "--engagement",
        "corpus/engagement.tsv",
    ];
    ok(
        p,
        &[
            &["build-dataset", "--mode", "warmup", "--out", "warm.jsonl"],
            &inputs[..],
        ]
        .concat(),
    );
    ok(
        p,
        &[
            &[
                "build-dataset",
                "--mode",
                "cascade",
                "--out",
                "cas.jsonl",
                "--theta",
                "0.5",
            ],
            &inputs[..],
        ]
        .concat(),
    );

    ok(
        p,
        &[
            "train",
            "--stage",
            "warmup",
            "--data",
            "warm.jsonl",
            "--out",
            "w.ckpt.json",
            "--epochs",
            "1",
        ],
    );
    ok(
        p,
        &[
            "train",
            "--stage",
            "cascade",
            "--data",
            "cas.jsonl",
            "--init",
            "w.ckpt.json",
            "--out",
            "c.ckpt.json",
            "--epochs",
            "1",
        ],
    );
    let trace = std::fs::read_to_string(p.join("c.ckpt.json.trace.csv")).unwrap();
    assert!(trace.starts_with("step,loss,pos_loss,neg_loss"));

    ok(
        p,
        &[
            "build-index",
            "--ckpt",
            "c.ckpt.json",
            "--catalog",
            "corpus/catalog.jsonl",
            "--out",
            "idx",
        ],
    );
    assert!(p.join("idx").join("catalog.ebrs").exists());

    let labels = [
        "--catalog",
        "corpus/catalog.jsonl",
        "--labels",
        "corpus/labels.jsonl",
    ];
    let stdout = ok(
        p,
        &[
            &[
                "evaluate",
                "--ckpt",
                "c.ckpt.json",
                "--k",
                "5,20",
                "--out",
                "r.json",
            ],
            &labels[..],
        ]
        .concat(),
    );
    assert!(stdout.contains("RECALL@20"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("r.json")).unwrap()).unwrap();
    assert!(report["recall"]["20"].as_f64().is_some());
    ok(
        p,
        &[
            &["baseline-bm25", "--mode", "rerank", "--out", "bm25.json"],
            &labels[..],
        ]
        .concat(),
    );
    ok(
        p,
        &[
            &[
                "export-scores",
                "--ckpt",
                "c.ckpt.json",
                "--out",
                "scores.csv",
            ],
            &labels[..],
            &[
                "--query",
                "milk",
                "--category-a",
                "Milk",
                "--category-b",
                "Chocolate",
                "--separation-out",
                "sep.json",
            ],
        ]
        .concat(),
    );
    assert!(std::fs::read_to_string(p.join("scores.csv"))
        .unwrap()
        .starts_with("query,product_id,gain,score"));
    let sep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("sep.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&sep["auc"].as_f64().unwrap()));
}

#[test]
fn pipeline_from_config_file() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &[&["gen-corpus", "--out", "corpus"], SMALL].concat());
    std::fs::write(
        p.join("run.toml"),
        r#"
rng_seed = 3
[paths]
catalog = "corpus/catalog.jsonl"
engagement = "corpus/engagement.tsv"
labels = "corpus/labels.jsonl"
output = "run"
[model]
dim = 16
hidden = 16
[stage1.train]
epochs = 1
[stage2.train]
epochs = 1
"#,
    )
    .unwrap();
    let stdout = ok(p, &["--config", "run.toml", "run-pipeline"]);
    assert!(stdout.contains("manifest") || p.join("run/manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rng_seed"], 3);
    let first = std::fs::read(p.join("run/report.json")).unwrap();

    // flags beat the environment, which beats the file
    let out = Command::new(env!("CARGO_BIN_EXE_ebr"))
        .current_dir(p)
        .env("EBR_SEED", "9")
        .env("RUST_LOG", "warn")
        .args([
            "--config",
            "run.toml",
            "--seed",
            "3",
            "run-pipeline",
            "--out",
            "again",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(first, std::fs::read(p.join("again/report.json")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("again/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rng_seed"], 3);
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let out = ebr(
        p,
        &[
            "build-dataset",
            "--mode",
            "warmup",
            "--catalog",
            "nope.jsonl",
            "--engagement",
            "nope.tsv",
            "--out",
            "x",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("build-dataset"), "{err}");

    ok(p, &[&["gen-corpus", "--out", "corpus"], SMALL].concat());
    let out = ebr(
        p,
        &[
            "run-pipeline",
            "--catalog",
            "corpus/catalog.jsonl",
            "--engagement",
            "corpus/engagement.tsv",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("paths.labels") && err.contains("config"),
        "{err}"
    );

    let out = ebr(p, &["gen-corpus", "--out", "c2", "--noise", "0.7"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_rate"));
}
