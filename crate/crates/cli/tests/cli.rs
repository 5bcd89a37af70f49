use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kt"))
        .args(args)
        .env("KT_LOG", "warn")
        .output()
        .expect("kt runs")
}

fn ok(args: &[&str]) -> String {
    let out = kt(args);
    assert!(
        out.status.success(),
        "kt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small synthetic log and returns its path.
fn synth_csv(dir: &Path, task: &str) -> PathBuf {
    let cfg = dir.join("synth.json");
    fs::write(&cfg, r#"{"n_students": 40, "n_skills": 5, "seq_len": 12}"#).unwrap();
    let out = dir.join(format!("{task}.csv"));
    ok(&[
        "synth",
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--task",
        task,
        "--out",
        s(&out),
    ]);
    out
}

fn write_run(dir: &Path, data: &str, model: &str, task: &str, epochs: usize) -> PathBuf {
    let p = dir.join(format!("{model}-{task}.json"));
    let body = format!(
        r#"{{"data": "{data}", "out_dir": "runs/{model}-{task}",
            "train": {{"model": "{model}", "task": "{task}", "epochs": {epochs}, "batch_size": 8,
                       "dims": {{"hidden": 8}}}}}}"#
    );
    fs::write(&p, body).unwrap();
    p
}

fn metric_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn preprocess_assist09_counts_skills_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("log.csv");
    fs::write(
        &csv,
        "order_id,user_id,skill_id,correct\n1,u1,s9,1\n2,u1,s3,0\n3,u2,s9,0\n4,u2,,1\n5,u2,s7,1\n5,u2,s7,1\n",
    )
    .unwrap();
    let input = fs::read(&csv).unwrap();
    let out = tmp.path().join("prep");
    let args = [
        "preprocess",
        "--input",
        s(&csv),
        "--schema",
        "assist09",
        "--out-dir",
        s(&out),
    ];
    let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(report["removed"], serde_json::json!({"nan": 1, "dup": 1}));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["n_skills"], 3);
    let before = fs::read(out.join("records.jsonl")).unwrap();
    ok(&args);
    assert_eq!(fs::read(out.join("records.jsonl")).unwrap(), before);
    assert_eq!(fs::read(&csv).unwrap(), input);
}

#[test]
fn preprocess_scored_normalizes_into_unit_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = synth_csv(tmp.path(), "subjective");
    let out = tmp.path().join("prep");
    ok(&[
        "preprocess",
        "--input",
        s(&csv),
        "--schema",
        "scored",
        "--out-dir",
        s(&out),
    ]);
    for rec in metric_lines(&out.join("records.jsonl")) {
        let a = rec["outcome"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a), "{a}");
    }
}

#[test]
fn preprocess_missing_column_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bad.csv");
    fs::write(&csv, "order_id,user_id,correct\n1,u,1\n").unwrap();
    let out = kt(&[
        "preprocess",
        "--input",
        s(&csv),
        "--schema",
        "assist09",
        "--out-dir",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skill_id"));
}

#[test]
fn dkt_objective_run_reports_auc_every_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = synth_csv(tmp.path(), "objective");
    ok(&[
        "preprocess",
        "--input",
        s(&csv),
        "--schema",
        "assist09",
        "--out-dir",
        s(&tmp.path().join("prep")),
    ]);
    let cfg = write_run(tmp.path(), "prep", "dkt", "objective", 5);
    ok(&["train", "--config", s(&cfg)]);
    let run = tmp.path().join("runs/dkt-objective");
    let lines = metric_lines(&run.join("metrics.jsonl"));
    assert_eq!(lines.len(), 10);
    assert!(lines.iter().all(|l| l["auc"].is_number()));
    assert_eq!(lines[9]["epoch"], 5);

    let eval = |_: ()| {
        ok(&[
            "evaluate",
            "--checkpoint",
            s(&run.join("model.ckpt")),
            "--data",
            s(&tmp.path().join("prep")),
        ])
    };
    let first = eval(());
    assert_eq!(first, eval(()));
    let printed: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(printed, lines[9]);
}

#[test]
fn train_with_ingest_block_and_subjective_reports_have_no_auc() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = synth_csv(tmp.path(), "subjective");
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"ingest": {{"input": "{}", "schema": "scored"}}, "out_dir": "out",
                "train": {{"model": "gkt", "task": "subjective", "epochs": 2, "batch_size": 8,
                           "dims": {{"hidden": 6, "embed_dim": 4}}}}}}"#,
            csv.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&cfg)]);
    let lines = metric_lines(&tmp.path().join("out/metrics.jsonl"));
    assert_eq!(lines.len(), 4);
    for l in &lines {
        for k in ["rmse", "mae", "acc"] {
            assert!(l[k].is_number(), "{k}");
        }
        assert!(l.get("auc").is_none());
    }
    assert!(tmp.path().join("out/data/meta.json").exists());
}

#[test]
fn evaluate_rejects_data_of_the_other_task() {
    let tmp = tempfile::tempdir().unwrap();
    let obj = synth_csv(tmp.path(), "objective");
    let sub = synth_csv(tmp.path(), "subjective");
    let (po, ps) = (tmp.path().join("po"), tmp.path().join("ps"));
    ok(&[
        "preprocess",
        "--input",
        s(&obj),
        "--schema",
        "assist09",
        "--out-dir",
        s(&po),
    ]);
    ok(&[
        "preprocess",
        "--input",
        s(&sub),
        "--schema",
        "scored",
        "--out-dir",
        s(&ps),
    ]);
    let cfg = write_run(tmp.path(), "po", "dkvmn", "objective", 1);
    ok(&["train", "--config", s(&cfg)]);
    let ck = tmp.path().join("runs/dkvmn-objective/model.ckpt");
    let out = kt(&["evaluate", "--checkpoint", s(&ck), "--data", s(&ps)]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(
        msg.contains("objective") && msg.contains("subjective"),
        "{msg}"
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(
        kt(&["train", "--config", s(&missing)]).status.code(),
        Some(2)
    );
    assert_eq!(kt(&["train"]).status.code(), Some(2));
    assert_eq!(kt(&["frobnicate"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"data": "d", "out_dir": "o", "train": {"model": "dkt", "task": "objective"}, "x": 1}"#,
    )
    .unwrap();
    assert_eq!(kt(&["train", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(kt(&["--help"]).status.code(), Some(0));
}

#[test]
fn report_of_one_file_has_one_row() {
    let table = ok(&["report", "--metrics", s(&fixture("gkt_assist.jsonl"))]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().contains("0.7641"));
}

#[test]
fn report_matches_golden_table() {
    let table = ok(&[
        "report",
        "--metrics",
        s(&fixture("gkt_assist.jsonl")),
        s(&fixture("dkvmn_scored.jsonl")),
        s(&fixture("dkt_assist.jsonl")),
    ]);
    let golden = fs::read_to_string(fixture("report.golden.txt")).unwrap();
    assert_eq!(table, golden);
}
