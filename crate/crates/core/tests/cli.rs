use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use l2o_tune::bench::{read_report_csv, BenchmarkReport};
use l2o_tune::cli::RunManifest;
use l2o_tune::{SearchSpace, TuningVector};

fn l2o(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2o-tune"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = l2o(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn stderr_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_string()
}

/// A small but complete run: data, surrogate and agent.
fn trained_run(dir: &Path) {
    ok(
        dir,
        &["gen-data", "--fixture", "bump4x16", "--rows", "200", "--seed", "3"],
    );
    ok(dir, &["train-surrogate", "--epochs", "80"]);
    ok(dir, &["train-agent", "--updates", "10", "--steps", "8", "--batch", "4"]);
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_one_csv_per_device_deterministically() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for d in [&a, &b] {
        ok(d, &["gen-data", "--fixture", "bump4x16", "--rows", "50", "--seed", "9"]);
    }
    let fa = csv_files(&a.join("data"));
    assert_eq!(fa.len(), 8);
    for (x, y) in fa.iter().zip(csv_files(&b.join("data"))) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let header = std::fs::read_to_string(&fa[0])
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, "k1,k2,k3,k4,performance");
    let m = RunManifest::load_or_default(&a).unwrap();
    assert_eq!(m.datasets.len(), 8);
    assert_eq!(m.seeds["gen-data"], 9);
}

#[test]
fn gen_data_rejects_zero_rows() {
    let dir = tempfile::tempdir().unwrap();
    let space = SearchSpace::new(vec![l2o_tune::KnobSpec::integer("k1", 0, 7)]).unwrap();
    let space_path = dir.path().join("space.json");
    std::fs::write(&space_path, serde_json::to_string(&space).unwrap()).unwrap();
    let cfg = dir.path().join("gen.json");
    std::fs::write(
        &cfg,
        r#"{"devices":[{"id":"d0","optimum":[3],"amplitude":1.0,"width":0.3,"noise_std":0.0,"n_rows":0}]}"#,
    )
    .unwrap();
    let o = l2o(
        &dir.path().join("out"),
        &[
            "gen-data",
            "--space",
            space_path.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
    );
    assert!(!o.status.success());
    let line = stderr_line(&o);
    assert!(
        line.starts_with("error: invalid-config:") && line.contains("n_rows"),
        "{line}"
    );
}

#[test]
fn tune_prints_a_valid_point_and_bench_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_run(d);

    let out = ok(d, &["tune", "--steps", "8", "--seed", "5"]);
    let x_line = out.lines().find(|l| l.starts_with("x* = ")).unwrap();
    let values: Vec<f64> = x_line["x* = ".len()..]
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(|v| v.trim().parse().unwrap())
        .collect();
    let space = SearchSpace::from_json_file(&d.join("space.json")).unwrap();
    space.validate(&TuningVector(values)).unwrap();
    assert!(out.lines().any(|l| l.starts_with("f(x*) = ")));

    ok(
        d,
        &["bench", "--inits", "3", "--steps", "8", "--methods", "l2o,random,tpe"],
    );
    ok(d, &["report"]);
    let report = BenchmarkReport::load(&d.join("report.json")).unwrap();
    let raw = read_report_csv(&d.join("report.csv")).unwrap();
    assert_eq!(raw.len(), 3);
    for (m, r) in &report.methods {
        assert_eq!(raw[m], r.raw);
        assert_eq!(r.evals, vec![9; 3]);
    }
    let m = RunManifest::load_or_default(d).unwrap();
    assert!(m.report_csv.is_some() && m.checkpoint.is_some() && m.learning_curve.is_some());
}

#[test]
fn mismatched_space_hash_is_a_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_run(d);
    let other = SearchSpace::new(
        (1..=4)
            .map(|i| l2o_tune::KnobSpec::integer(format!("k{i}"), 0, 14))
            .collect(),
    )
    .unwrap();
    let p = d.join("other_space.json");
    std::fs::write(&p, serde_json::to_string(&other).unwrap()).unwrap();
    let o = l2o(d, &["tune", "--space", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(
        stderr_line(&o).starts_with("error: schema-mismatch:"),
        "{}",
        stderr_line(&o)
    );

    // A checkpoint trained elsewhere is rejected against this surrogate too.
    let e = dir.path().join("elsewhere");
    ok(&e, &["gen-data", "--fixture", "tiny1x8", "--rows", "40"]);
    ok(&e, &["train-surrogate", "--epochs", "10"]);
    ok(&e, &["train-agent", "--updates", "2", "--steps", "2", "--batch", "2"]);
    let ckpt = e.join("checkpoint.json");
    let o = l2o(d, &["tune", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).starts_with("error: schema-mismatch:"));
}

#[test]
fn missing_artifacts_and_bad_flags_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = l2o(dir.path(), &["train-agent"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).starts_with("error: missing-artifact:"));
    let o = l2o(
        dir.path(),
        &["bench", "--fixture", "tiny1x8", "--methods", "l2o,simplex"],
    );
    assert!(stderr_line(&o).starts_with("error: invalid-config:"));
    let o = l2o(dir.path(), &["bench", "--fixture", "tiny1x8", "--methods", "l2o"]);
    assert!(stderr_line(&o).starts_with("error: invalid-config:"));
}

#[test]
fn bench_runs_on_a_fixture_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "bench",
            "--fixture",
            "bump1x16",
            "--methods",
            "random,tpe,powell_budget",
            "--jobs",
            "2",
        ],
    );
    assert!(out.contains("powell_budget"));
    let report = BenchmarkReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(report.methods.len(), 3);
    assert!(report
        .methods
        .values()
        .all(|r| r.raw.len() == 16 && r.evals.iter().all(|&e| e <= 51)));
}
