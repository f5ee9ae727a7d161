use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tgg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgg"))
        .args(args)
        .output()
        .expect("spawn tgg")
}

fn ok(args: &[&str]) -> String {
    let out = tgg(args);
    assert!(
        out.status.success(),
        "tgg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_CONFIG: &str = r#"{
  "data": {"synthetic": {"instances_per_class": 20, "seed": 3}},
  "episodes": 6,
  "val_interval": 3,
  "val_episodes": 2,
  "eval_trials": 2,
  "eval_episodes": 1,
  "eval_queries": 10,
  "agg_dims": [16, 8],
  "gcn_dims": [8, 4],
  "edge_hidden": 8,
  "sample_sizes": [4, 2]
}"#;

#[test]
fn data_graph_and_synth_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let printed = ok(&["synth-data", "--out", s(&data)]);
    assert_eq!(printed.lines().count(), 3);
    let (f, a, sp) = (
        data.join("features.csv"),
        data.join("attributes.csv"),
        data.join("splits.json"),
    );
    for p in [&f, &a, &sp] {
        assert!(p.exists(), "{} missing", p.display());
    }

    let report = ok(&[
        "dataset",
        "validate",
        "--features",
        s(&f),
        "--attributes",
        s(&a),
        "--splits",
        s(&sp),
    ]);
    assert!(report.contains("instances"));

    let graph = dir.path().join("graph.tsv");
    ok(&["graph", "build", "--attributes", s(&a), "--out", s(&graph)]);
    let full = fs::read_to_string(&graph).unwrap().lines().count();
    let cropped = dir.path().join("cropped.tsv");
    ok(&[
        "graph",
        "crop",
        "--graph",
        s(&graph),
        "--attributes",
        s(&a),
        "--threshold",
        "0.5",
        "--out",
        s(&cropped),
    ]);
    let kept = fs::read_to_string(&cropped).unwrap().lines().count();
    assert!(kept <= full);

    let synth = dir.path().join("synth.json");
    ok(&[
        "synth",
        "fit",
        "--features",
        s(&f),
        "--attributes",
        s(&a),
        "--splits",
        s(&sp),
        "--out",
        s(&synth),
    ]);
    let sampled = dir.path().join("sampled.csv");
    let class = fs::read_to_string(&a)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    ok(&[
        "synth",
        "sample",
        "--synth",
        s(&synth),
        "--class",
        &class,
        "--attributes",
        s(&a),
        "--count",
        "7",
        "--out",
        s(&sampled),
    ]);
    let rows = fs::read_to_string(&sampled).unwrap();
    assert_eq!(rows.lines().count(), 8);
    assert!(rows.lines().skip(1).all(|l| l.contains(&class)));
}

#[test]
fn train_eval_export_and_propagate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);

    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(log.lines().next().unwrap().starts_with("episode,seed,loss_c"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["test"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let ckpt = run.join("checkpoint.json");
    let exported = dir.path().join("graph.json");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--mode",
        "gzsl",
        "--export-graph",
        s(&exported),
    ]);
    let m: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(m["mode"], "gzsl");
    assert!(m["hm"].as_f64().is_some());

    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(&exported).unwrap()).unwrap();
    let n = g["known"].as_array().unwrap().len();
    assert!(n > 0);
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["propagate", "--graph", s(&exported), "--mu", "0.5"])).unwrap();
    let preds = report["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), n);
    let labeled = g["known"].as_array().unwrap().iter().filter(|k| !k.is_null()).count();
    assert_eq!(preds.iter().filter(|p| p.is_null()).count(), labeled);
    assert!((0.0..=1.0).contains(&report["accuracy"].as_f64().unwrap()));
}

#[test]
fn eval_reproduces_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let trained: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let out = dir.path().join("eval.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--mode",
        "zsl",
        "--out",
        s(&out),
    ]);
    let evaluated: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(trained["test"], evaluated);
}

#[test]
fn sweep_writes_one_row_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let csv = dir.path().join("sweep.csv");
    ok(&["sweep", "--config", s(&cfg), "--thresholds", "1.0,0", "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "threshold,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with('0'));
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", s(&data)]);
    let a = data.join("attributes.csv");
    let graph = dir.path().join("graph.tsv");
    ok(&["graph", "build", "--attributes", s(&a), "--out", s(&graph)]);

    let out = tgg(&[
        "graph",
        "crop",
        "--graph",
        s(&graph),
        "--attributes",
        s(&a),
        "--threshold",
        "1.5",
        "--out",
        "x",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshold"));

    let out = tgg(&["eval", "--checkpoint", "missing.json", "--mode", "zsl"]);
    assert!(!out.status.success());

    let out = tgg(&["eval", "--checkpoint", "missing.json", "--mode", "transductive"]);
    assert!(!out.status.success());

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"mu": 1.5}"#).unwrap();
    let out = tgg(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
}
