use std::path::Path;
use std::process::{Command, Output};

fn latentcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = latentcast(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn json(path: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(latentcast(&["--help"]).status.code(), Some(0));
    assert_eq!(latentcast(&["--version"]).status.code(), Some(0));
    assert_eq!(latentcast(&["train-seq", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(latentcast(&[]).status.code(), Some(1));
    assert_eq!(latentcast(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        latentcast(&["split", "--dataset", "x.npy"]).status.code(),
        Some(1)
    );
    let dir = tempfile::tempdir().unwrap();
    let ds = p(dir.path(), "d.npy");
    ok(&[
        "synth",
        "--kind",
        "surveillance",
        "--sequences",
        "4",
        "--length",
        "6",
        "--size",
        "16",
        "--out",
        &ds,
    ]);
    let bad_kind = latentcast(&[
        "train-seq",
        "--latents",
        &ds,
        "--kind",
        "transformer",
        "--out",
        &p(dir.path(), "m"),
    ]);
    assert_eq!(bad_kind.status.code(), Some(1));
    let bad_dims = latentcast(&[
        "train-ae",
        "--dataset",
        &ds,
        "--dims",
        "4,8,16,32,64",
        "--out",
        &p(dir.path(), "a"),
    ]);
    assert_eq!(
        bad_dims.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&bad_dims.stderr)
    );
    let tiny = latentcast(&[
        "synth",
        "--kind",
        "digits",
        "--size",
        "16",
        "--out",
        &p(dir.path(), "t.npy"),
    ]);
    assert_eq!(tiny.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = latentcast(&[
        "split",
        "--dataset",
        &p(dir.path(), "none.npy"),
        "--out",
        &p(dir.path(), "s.json"),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    let garbage = p(dir.path(), "g.npy");
    std::fs::write(&garbage, b"not an array").unwrap();
    let out = latentcast(&[
        "ingest",
        "--input",
        &garbage,
        "--out",
        &p(dir.path(), "o.npy"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let ds = p(dir.path(), "d.npy");
    ok(&[
        "synth",
        "--kind",
        "surveillance",
        "--sequences",
        "4",
        "--length",
        "6",
        "--size",
        "16",
        "--out",
        &ds,
    ]);
    let short = latentcast(&[
        "preprocess",
        "--in",
        &ds,
        "--len",
        "20",
        "--size",
        "16",
        "--out",
        &p(dir.path(), "pp.npy"),
    ]);
    assert_eq!(short.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let ds = p(dir.path(), "d.npy");
    ok(&[
        "synth",
        "--kind",
        "surveillance",
        "--sequences",
        "5",
        "--length",
        "6",
        "--size",
        "16",
        "--out",
        &ds,
    ]);
    let out = latentcast(&[
        "train-ae",
        "--dataset",
        &ds,
        "--dims",
        "4,8",
        "--lr",
        "1e30",
        "--epochs",
        "3",
        "--batch",
        "8",
        "--out",
        &p(dir.path(), "ae"),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn staged_workflow_produces_runs_bench_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let raw = p(d, "raw.npy");
    ok(&[
        "synth",
        "--kind",
        "digits",
        "--sequences",
        "10",
        "--length",
        "10",
        "--size",
        "32",
        "--seed",
        "4",
        "--out",
        &raw,
    ]);
    let ingested = p(d, "ingested.npy");
    ok(&[
        "ingest",
        "--input",
        &raw,
        "--format",
        "npy",
        "--channels",
        "1",
        "--out",
        &ingested,
    ]);
    let frames = p(d, "frames.npy");
    let summary = ok(&[
        "preprocess",
        "--in",
        &ingested,
        "--len",
        "8",
        "--size",
        "16",
        "--continuity-report",
        &p(d, "cont.json"),
        "--out",
        &frames,
    ]);
    assert!(summary.contains("sequences"), "{summary}");
    let split = p(d, "split.json");
    let counts = ok(&[
        "split",
        "--dataset",
        &frames,
        "--test",
        "0.2",
        "--val",
        "0.2",
        "--seed",
        "1",
        "--out",
        &split,
    ]);
    assert_eq!(counts.trim(), "train 7 / val 1 / test 2");

    let ae = p(d, "runs/ae");
    ok(&[
        "train-ae",
        "--dataset",
        &frames,
        "--dims",
        "4,8",
        "--epochs",
        "2",
        "--batch",
        "16",
        "--split",
        &split,
        "--out",
        &ae,
    ]);
    assert!(json(&p(d, "runs/ae/run.json"))["metrics"]["ssim"].is_number());

    let latents = p(d, "latents.npy");
    let shape = ok(&[
        "extract",
        "--ckpt",
        &ae,
        "--dataset",
        &frames,
        "--out",
        &latents,
    ]);
    assert_eq!(shape.trim(), "latents (10, 8, 4, 4, 8)");

    let seq = p(d, "runs/convlstm");
    ok(&[
        "train-seq",
        "--latents",
        &latents,
        "--kind",
        "convlstm",
        "--hidden",
        "4",
        "--window",
        "3",
        "--epochs",
        "2",
        "--batch",
        "8",
        "--split",
        &split,
        "--kfold",
        "2",
        "--out",
        &seq,
    ]);
    let run = json(&p(d, "runs/convlstm/run.json"));
    assert_eq!(run["name"], "latent/convlstm");
    assert_eq!(run["folds"]["losses"].as_array().unwrap().len(), 2);

    let pix = p(d, "runs/pixel");
    ok(&[
        "train-seq",
        "--latents",
        &frames,
        "--pixel",
        "--kind",
        "convlstm",
        "--hidden",
        "4",
        "--window",
        "3",
        "--epochs",
        "1",
        "--split",
        &split,
        "--out",
        &pix,
    ]);
    assert!(json(&p(d, "runs/pixel/run.json"))["metrics"]["ssim"].is_number());

    ok(&[
        "bench",
        "--ckpt",
        &seq,
        "--latents",
        &latents,
        "--iters",
        "30",
        "--warmup",
        "5",
    ]);
    let bench = json(&p(d, "runs/convlstm/bench.json"));
    assert_eq!(bench["iterations"], 30);
    assert_eq!(bench["label"], "latent/convlstm");
    let few = latentcast(&[
        "bench",
        "--ckpt",
        &seq,
        "--latents",
        &latents,
        "--iters",
        "3",
        "--out",
        &p(d, "b.json"),
    ]);
    assert_eq!(few.status.code(), Some(1));

    let table = ok(&[
        "report",
        "--runs",
        &p(d, "runs"),
        "--out",
        &p(d, "report.json"),
        "--svg",
        &p(d, "ssim.svg"),
    ]);
    assert!(
        table.contains("latent/convlstm") && table.contains("pixel/convlstm"),
        "{table}"
    );
    let report = json(&p(d, "report.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);
    assert!(report["bench"].is_array());
    assert!(std::fs::read_to_string(p(d, "ssim.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn evaluate_scores_identical_frames_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = p(dir.path(), "d.npy");
    ok(&[
        "synth",
        "--kind",
        "surveillance",
        "--sequences",
        "3",
        "--length",
        "5",
        "--size",
        "16",
        "--out",
        &ds,
    ]);
    let out = p(dir.path(), "eval.json");
    ok(&[
        "evaluate",
        "--pred",
        &ds,
        "--truth",
        &ds,
        "--metrics",
        "mae,mse,ssim",
        "--out",
        &out,
    ]);
    let v = json(&out);
    assert_eq!(v["mse"], 0.0);
    assert_eq!(v["mae"], 0.0);
    assert_eq!(v["ssim"], 1.0);
    assert_eq!(v["count"], 15);
    let bad = latentcast(&[
        "evaluate",
        "--pred",
        &ds,
        "--truth",
        &ds,
        "--metrics",
        "psnr",
        "--out",
        &out,
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gridsearch_reads_a_grid_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = p(dir.path(), "d.npy");
    ok(&[
        "synth",
        "--kind",
        "surveillance",
        "--sequences",
        "8",
        "--length",
        "6",
        "--size",
        "8",
        "--out",
        &ds,
    ]);
    let grid = p(dir.path(), "grid.json");
    std::fs::write(
        &grid,
        r#"{"hidden_layers":[1],"hidden_size":[2,3],"loss":["mse"],"optimizer":["adam"],"learning_rate":[0.01],"window":[3]}"#,
    )
    .unwrap();
    let out = p(dir.path(), "gs");
    let line = ok(&[
        "gridsearch",
        "--stage",
        "seq",
        "--kind",
        "gru",
        "--grid",
        &grid,
        "--dataset",
        &ds,
        "--kfold",
        "2",
        "--epochs",
        "1",
        "--out",
        &out,
    ]);
    assert!(line.starts_with("best #"), "{line}");
    let results = json(&p(dir.path(), "gs/results.json"));
    assert_eq!(results.as_array().unwrap().len(), 2);
    std::fs::write(&grid, r#"{"hidden_size":[]}"#).unwrap();
    let bad = latentcast(&[
        "gridsearch",
        "--stage",
        "seq",
        "--kind",
        "gru",
        "--grid",
        &grid,
        "--dataset",
        &ds,
        "--out",
        &out,
    ]);
    assert_eq!(bad.status.code(), Some(1));
    std::fs::write(
        &grid,
        r#"{"hidden_layers":[1],"hidden_size":[],"loss":["mse"],"optimizer":["adam"],"learning_rate":[0.01],"window":[3]}"#,
    )
    .unwrap();
    let bad = latentcast(&[
        "gridsearch",
        "--stage",
        "seq",
        "--kind",
        "gru",
        "--grid",
        &grid,
        "--dataset",
        &ds,
        "--out",
        &out,
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn pipeline_runs_end_to_end_with_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let ds = p(dir.path(), "d.npy");
    ok(&[
        "synth",
        "--kind",
        "surveillance",
        "--sequences",
        "6",
        "--length",
        "7",
        "--size",
        "16",
        "--out",
        &ds,
    ]);
    let out = p(dir.path(), "pipe");
    let text = ok(&[
        "pipeline",
        "--dataset",
        &ds,
        "--dims",
        "4,8",
        "--kind",
        "cnn3d",
        "--hidden",
        "4",
        "--window",
        "3",
        "--epochs",
        "1",
        "--baseline",
        "--out",
        &out,
    ]);
    assert!(
        text.contains("latent cnn3d") && text.contains("pixel cnn3d"),
        "{text}"
    );
    let rep = json(&p(dir.path(), "pipe/pipeline.json"));
    let test: Vec<&serde_json::Value> = rep["split"]["test_ids"]
        .as_array()
        .unwrap()
        .iter()
        .collect();
    assert_eq!(test.len(), 1);
    assert_eq!(rep["predictions"], 4);
}
