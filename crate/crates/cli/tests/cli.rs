use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = dmap(args);
    assert!(
        out.status.success(),
        "dmap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn exact_dataset(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    ok(&["synth", "--preset", "exact", "--seed", "2", "--out-dir", p(&data)]);
    data
}

const EXACT_CONFIG: &str = r#"{"gamma": 1e-10, "eta": 1e-10, "lambda": 1e-6, "m": 10,
  "objective": "embedding_regression"}"#;

#[test]
fn pipeline_recovers_exact_preset_at_every_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = exact_dataset(tmp.path());
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, EXACT_CONFIG).unwrap();
    let out = tmp.path().join("out");
    ok(&["pipeline", "--config", p(&cfg), "--data-dir", p(&data), "--out-dir", p(&out)]);

    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,mode,mean_per_class_acc,top1,cm,irc_gap"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let czsr: Vec<_> = rows.iter().filter(|r| r[1] == "czsr").collect();
    assert_eq!(czsr.len(), 3);
    for r in czsr {
        assert_eq!(r[2].parse::<f64>().unwrap(), 1.0, "row {r:?}");
    }
    assert!(out.join("cm.json").exists());
    assert!(out.join("eval/czsr_iter2.json").exists());
    assert!(out.join("eval/gzsr_iter0_confusion.csv").exists());
}

#[test]
fn pipeline_is_idempotent_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--preset", "noisy", "--seed", "1", "--out-dir", p(&data)]);
    let before = fs::read(data.join("train_features.mat")).unwrap();
    let run = |name: &str, threads: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "--threads", threads, "pipeline", "--data-dir", p(&data), "--out-dir", p(&out), "--m", "20",
        ]);
        (
            fs::read(out.join("summary.csv")).unwrap(),
            fs::read(out.join("eval/gzsr_iter1.json")).unwrap(),
        )
    };
    let a = run("a", "1");
    let b = run("b", "4");
    assert_eq!(a, b);
    assert_eq!(fs::read(data.join("train_features.mat")).unwrap(), before);
}

#[test]
fn preinspect_flags_the_single_defect_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.json");
    fs::write(
        &cfg,
        r#"{"d": 20, "p": 12, "k": 6, "l": 6, "n_per_class": 5, "defect_pairs": 1, "seed": 4}"#,
    )
    .unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--config", p(&cfg), "--out-dir", p(&data)]);
    let report = tmp.path().join("report.json");
    ok(&[
        "preinspect",
        "--embeddings",
        p(&data.join("embeddings.mat")),
        "--split",
        p(&data.join("split.json")),
        "--epsilon",
        "1e-9",
        "--out",
        p(&report),
    ]);
    let flagged = json(&report)["flagged_pairs"].as_array().unwrap().clone();
    assert_eq!(flagged.len(), 1);
    assert_eq!(flagged[0]["class_i"], "u0");
    assert_eq!(flagged[0]["class_j"], "u1");
}

#[test]
fn preinspect_with_separate_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let ks = tmp.path().join("ks.mat");
    let ku = tmp.path().join("ku.mat");
    // span(K_s) is the first axis; columns 0 and 2 of K_u project identically
    fs::write(&ks, "dmap-matrix 1 2 1\n1.0\n0.0\n").unwrap();
    fs::write(&ku, "dmap-matrix 1 2 3\n0.5 2.0 0.5\n1.0 0.0 -1.0\n").unwrap();
    let out = tmp.path().join("r.json");
    ok(&["preinspect", "--kseen", p(&ks), "--kunseen", p(&ku), "--out", p(&out)]);
    let report = json(&out);
    let flagged = report["flagged_pairs"].as_array().unwrap();
    assert_eq!(flagged.len(), 1);
    assert_eq!(flagged[0]["class_i"], "0");
    assert_eq!(flagged[0]["class_j"], "2");
    assert_eq!(report["pairwise_distances"][0][1], 1.5);
}

#[test]
fn eval_hand_written_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.json");
    // instance 0: a (correct); 1: a but truly b; 2: b (correct)
    fs::write(
        &pred,
        r#"{"mode": "czsr", "instance_ids": ["0", "1", "2"], "candidates": ["a", "b"],
            "seen_candidates": 0, "predicted": ["a", "a", "b"],
            "scores": [[0.9, 0.6, 0.1], [0.1, 0.4, 0.8]]}"#,
    )
    .unwrap();
    let truth = tmp.path().join("truth.txt");
    fs::write(&truth, "a\nb\nb\n").unwrap();
    let out = tmp.path().join("report.json");
    let csv = tmp.path().join("confusion.csv");
    ok(&[
        "eval", "--pred", p(&pred), "--truth", p(&truth), "--mode", "czsr", "--topk", "1,2",
        "--out", p(&out), "--confusion-csv", p(&csv),
    ]);
    let r = json(&out);
    assert_eq!(r["per_class_accuracy"]["a"], 1.0);
    assert_eq!(r["per_class_accuracy"]["b"], 0.5);
    assert_eq!(r["mean_per_class_accuracy"], 0.75);
    assert!((r["top1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(r["top_k_accuracy"]["2"], 1.0);
    assert_eq!(r["confusion"], serde_json::json!([[1, 0], [1, 1]]));
    assert_eq!(fs::read_to_string(csv).unwrap(), "true\\predicted,a,b\na,1,0\nb,1,1\n");
}

#[test]
fn train_predict_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = exact_dataset(tmp.path());
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, EXACT_CONFIG).unwrap();
    let model = tmp.path().join("model");
    let f = |name: &str| data.join(name);
    ok(&[
        "train", "--features", p(&f("train_features.mat")), "--labels", p(&f("train_labels.txt")),
        "--split", p(&f("split.json")), "--embeddings", p(&f("embeddings.mat")), "--config", p(&cfg),
        "--model-dir", p(&model),
    ]);
    for name in ["f_s.mat", "f_tilde.mat", "k_tilde_s.mat", "model.json"] {
        assert!(model.join(name).exists(), "{name}");
    }
    let pred = tmp.path().join("pred.json");
    ok(&[
        "predict", "--model-dir", p(&model), "--test-features", p(&f("test_features.mat")),
        "--split", p(&f("split.json")), "--embeddings", p(&f("embeddings.mat")), "--config", p(&cfg),
        "--mode", "gzsr", "--out", p(&pred),
    ]);
    assert!(tmp.path().join("pred.k_tilde_u.mat").exists());
    assert_eq!(json(&pred)["mode"], "gzsr");
    let report = tmp.path().join("report.json");
    ok(&["eval", "--pred", p(&pred), "--truth", p(&f("test_labels.txt")), "--out", p(&report)]);
    assert_eq!(json(&report)["mean_per_class_accuracy"], 1.0);

    let cm = tmp.path().join("cm.json");
    ok(&[
        "cm", "--features", p(&f("train_features.mat")), p(&f("test_features.mat")),
        "--labels", p(&f("train_labels.txt")), p(&f("test_labels.txt")),
        "--split", p(&f("split.json")), "--embeddings", p(&f("embeddings.mat")),
        "--lambda", "1e-6", "--out", p(&cm),
    ]);
    let cm = json(&cm);
    assert!(cm["cm"].as_f64().unwrap() >= 1.0 - 1e-6);
    assert!(cm["irc_gap"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn errors_are_structured_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = exact_dataset(tmp.path());
    let f = |name: &str| data.join(name);

    let missing = dmap(&["eval", "--pred", "/nonexistent/pred.json", "--truth", "x", "--out", "y"]);
    assert_eq!(missing.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"], "IoError");

    let singular = dmap(&[
        "train", "--features", p(&f("train_features.mat")), "--labels", p(&f("train_labels.txt")),
        "--split", p(&f("split.json")), "--embeddings", p(&f("embeddings.mat")), "--gamma", "0",
        "--eta", "0", "--model-dir", p(&tmp.path().join("m")),
    ]);
    assert_eq!(singular.status.code(), Some(3));
    assert!(!tmp.path().join("m").exists(), "no outputs on failure");

    let bad_cfg = tmp.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"gamma": 1, "unknown_knob": 3}"#).unwrap();
    let invalid = dmap(&["pipeline", "--config", p(&bad_cfg), "--data-dir", p(&data), "--out-dir", "o"]);
    assert_eq!(invalid.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&invalid.stderr).unwrap();
    assert_eq!(err["error"], "ParseError");

    let bad_matrix = tmp.path().join("bad.mat");
    fs::write(&bad_matrix, "dmap-matrix 1 2 2\n1 2\n3 4\n5 6\n").unwrap();
    let shape = dmap(&[
        "preinspect", "--kseen", p(&bad_matrix), "--kunseen", p(&bad_matrix), "--out",
        p(&tmp.path().join("r.json")),
    ]);
    assert_eq!(shape.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&shape.stderr).unwrap();
    assert_eq!(err["error"], "ShapeMismatch");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = exact_dataset(tmp.path());
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"m": 0}"#).unwrap();
    let out = tmp.path().join("out");
    // m = 0 in the file is invalid, the flag fixes it
    ok(&[
        "pipeline", "--config", p(&cfg), "--data-dir", p(&data), "--out-dir", p(&out), "--m", "10",
        "--test-max-iter", "1",
    ]);
    let rows = fs::read_to_string(out.join("summary.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * 2);
}
