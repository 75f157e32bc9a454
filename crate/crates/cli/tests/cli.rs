//! Drives the `pcq` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn pcq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcq"))
        .args(args)
        .output()
        .expect("spawn pcq")
}

fn ok(args: &[&str]) -> String {
    let out = pcq(args);
    assert!(
        out.status.success(),
        "pcq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    pcq(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path) -> String {
    let out = dir.join("corpus");
    ok(&[
        "synth-data",
        "--out",
        s(&out),
        "--per-class",
        "6",
        "--taxonomy",
        "custom:a,b",
        "--folds",
        "3",
        "--seed",
        "4",
    ]);
    s(&out.join("manifest.csv")).to_string()
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let feat = dir.path().join("feat");
    let text = ok(&["features", "--manifest", &manifest, "--out", s(&feat)]);
    assert!(text.contains("0 clips failed"));

    let ckpt = dir.path().join("model.ckpt");
    let report = dir.path().join("train.json");
    ok(&[
        "train",
        "--manifest",
        &manifest,
        "--out",
        s(&ckpt),
        "--taxonomy",
        "custom:a,b",
        "--miniature",
        "--lr",
        "1e-3",
        "--max-epochs",
        "2",
        "--holdout-fold",
        "1",
        "--cache-dir",
        s(&feat),
        "--report",
        s(&report),
    ]);
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(doc["train_clips"], 8);
    assert_eq!(doc["epochs"].as_array().unwrap().len(), 2);

    let preds = dir.path().join("preds.csv");
    ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        &manifest,
        "--out",
        s(&preds),
    ]);
    let text = std::fs::read_to_string(&preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "clip_id,label,predicted,p_a,p_b");
    assert_eq!(lines.count(), 12);

    let fusion = dir.path().join("fusion.csv");
    ok(&[
        "export-features",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        &manifest,
        "--out",
        s(&fusion),
    ]);
    let text = std::fs::read_to_string(&fusion).unwrap();
    assert_eq!(text.lines().count(), 13);
    // miniature fusion: 4 + 8 + 12 + 16 + 16
    assert_eq!(text.lines().next().unwrap().split(',').count(), 56 + 2);
}

#[test]
fn cv_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"train": {"lr": 0.001, "max_epochs": 2, "folds": 3}}"#,
    )
    .unwrap();
    let run = |out: &Path| {
        ok(&[
            "cv",
            "--manifest",
            &manifest,
            "--out",
            s(out),
            "--config",
            s(&config),
            "--taxonomy",
            "custom:a,b",
            "--miniature",
        ])
    };
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let table = run(&a);
    run(&b);
    assert!(table.contains("mean  WA"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    assert_eq!(doc["folds"].as_array().unwrap().len(), 3);
    assert_eq!(doc["train"]["lr"], 0.001);
}

#[test]
fn make_folds_rewrites_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let out = dir.path().join("folds.csv");
    let text = ok(&[
        "make-folds",
        "--manifest",
        &manifest,
        "--out",
        s(&out),
        "--by",
        "random",
        "--folds",
        "4",
    ]);
    assert_eq!(text.lines().count(), 4);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("clip_id,path,label,speaker,fold"));
    // 3 speakers cannot fill 4 speaker-disjoint folds
    assert_eq!(
        code(&["make-folds", "--manifest", &manifest, "--folds", "4"]),
        2
    );
}

#[test]
fn params_tables() {
    let text = ok(&["params", "--block", "pdc", "--channels", "48"]);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, ["48", "13152", "13152.00", "20736"]);
    let text = ok(&["params", "--model", "mlcnn"]);
    assert!(text.trim_end().ends_with("total 89872"));
    let text = ok(&["params", "--model", "pcq", "--no-csq"]);
    assert!(text
        .lines()
        .any(|l| l.split_whitespace().eq(["fusion", "128"])));
    assert!(text.lines().any(|l| l.split_whitespace().eq(["csq", "0"])));
}

#[test]
fn gradcheck_reports_and_fails_loudly() {
    let text = ok(&[
        "gradcheck",
        "--case",
        "conv2d",
        "--case",
        "csq",
        "--seeds",
        "2",
    ]);
    assert_eq!(text.lines().filter(|l| l.ends_with("ok")).count(), 4);
    assert_eq!(
        code(&[
            "gradcheck",
            "--case",
            "conv2d",
            "--seeds",
            "1",
            "--tol",
            "0"
        ]),
        4
    );
    assert_eq!(code(&["gradcheck", "--case", "no_such_case"]), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let ck = s(&ckpt);
    // class count disagrees with the labels in the manifest
    assert_eq!(
        code(&[
            "train",
            "--manifest",
            &manifest,
            "--out",
            ck,
            "--taxonomy",
            "custom:a"
        ]),
        2
    );
    assert_eq!(
        code(&["train", "--manifest", &manifest, "--out", ck, "--lr", "0"]),
        2
    );
    // labels a/b are not in the default taxonomy
    assert_eq!(
        code(&["train", "--manifest", &manifest, "--out", ck, "--miniature"]),
        3
    );
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            "/nonexistent.ckpt",
            "--manifest",
            &manifest,
            "--out",
            ck
        ]),
        3
    );
    assert_eq!(
        code(&[
            "train",
            "--manifest",
            &manifest,
            "--out",
            ck,
            "--taxonomy",
            "custom:a,b",
            "--miniature",
            "--lr",
            "1e30",
            "--max-epochs",
            "3",
        ]),
        4
    );
    assert!(!ckpt.exists());
}
