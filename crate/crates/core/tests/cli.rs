use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use icl_kalman::codec::{read_dataset, read_predictions, Scheme};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-kalman"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = cli(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn generate_filter_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["generate", "--out", "data.json", "--strategy", "2", "--n", "3", "--horizon", "12", "--count", "20", "--seed", "4"],
        d,
    );
    let data = read_dataset(d.join("data.json")).unwrap();
    assert_eq!((data.n, data.horizon, data.count, data.scheme), (3, 12, 20, Scheme::Scalar));

    for (alg, file) in [("kf", "kf.json"), ("vm-kf", "vm.json"), ("ridge(0.05)", "ridge.json")] {
        ok(&["filter", "--data", "data.json", "--algorithm", alg, "--out", file], d);
    }
    let kf = read_predictions(d.join("kf.json")).unwrap();
    assert_eq!(kf.algorithm, "kf");
    assert_eq!(kf.examples.len(), 20);

    let out = ok(&["compare", "kf.json", "vm.json"], d);
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("context_length,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    for row in rows {
        let mspd: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!(mspd < 1e-18, "{row}");
    }

    ok(&["compare", "kf.json", "ridge.json", "--out", "cmp.csv"], d);
    assert!(fs::read_to_string(d.join("cmp.csv")).unwrap().lines().count() == 13);
}

#[test]
fn vm_run_trace_and_assembly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--out", "data.json", "--n", "2", "--horizon", "5", "--count", "2"], d);
    let out = ok(
        &["vm-run", "--data", "data.json", "--example", "1", "--emit-asm", "kf.asm", "--trace", "trace.jsonl"],
        d,
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["instructions"], 85);
    assert_eq!(summary["predictions"].as_array().unwrap().len(), 5);

    let trace = fs::read_to_string(d.join("trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 85);
    assert_eq!(lines[0]["instruction"], "TRANSPOSE B2 F");
    assert_eq!(lines[16]["dst"], "B1");

    let replay = ok(&["vm-run", "--data", "data.json", "--example", "1", "--program", "kf.asm"], d);
    assert_eq!(replay.stdout, out.stdout);

    let dual = ok(&["vm-run", "--data", "data.json", "--mode", "dual-kf"], d);
    let summary: serde_json::Value = serde_json::from_slice(&dual.stdout).unwrap();
    assert_eq!(summary["mode"], "dual-kf");
}

#[test]
fn evaluate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = r#"{
        "sampler": {
            "n": 2, "m": 1, "strategy": "symmetric-stable",
            "sigma_q2": {"kind": "constant", "value": 0.025},
            "sigma_r2": {"kind": "constant", "value": 0.025},
            "alpha": {"mode": "uniform"},
            "context_length": {"kind": "constant", "value": 8},
            "seed": 1
        },
        "scheme": "scalar",
        "count": 50,
        "algorithms": ["kf", "ols", "sgd(0.05)"]
    }"#;
    fs::write(d.join("config.json"), config).unwrap();
    for out in ["a", "b"] {
        ok(&["evaluate", "--config", "config.json", "--out", out, "--seed", "7"], d);
    }
    for file in ["mspd.csv", "state_mse.csv", "report.json"] {
        let a = fs::read(d.join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(d.join("b").join(file)).unwrap(), "{file}");
        assert!(!a.is_empty());
    }
}

#[test]
fn export_context_reencodes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--out", "data.json", "--n", "2", "--horizon", "3", "--count", "4"], d);
    ok(&["export-context", "--data", "data.json", "--scheme", "scalar-no-cov", "--out", "nocov.json"], d);
    let file = read_dataset(d.join("nocov.json")).unwrap();
    assert_eq!(file.scheme, Scheme::ScalarNoCov);
    let ctx = file.examples[0].context(file.scheme, file.n, file.m, file.horizon).unwrap();
    assert_eq!(ctx.data.shape(), (3, 11));
    assert_eq!(ctx.data[(0, 4)], 0.0);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = cli(&["filter", "--data", "nope.json", "--algorithm", "kf", "--out", "p.json"], d);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    ok(&["generate", "--out", "data.json", "--n", "2", "--horizon", "3", "--count", "1"], d);
    let bad_alg = cli(&["filter", "--data", "data.json", "--algorithm", "sgd(-1)", "--out", "p.json"], d);
    assert!(!bad_alg.status.success());
    let bad_example = cli(&["vm-run", "--data", "data.json", "--example", "3"], d);
    assert!(!bad_example.status.success());

    fs::write(d.join("broken.asm"), ".program kf n=2 N=3\nMUL B1 F\n").unwrap();
    let bad_asm = cli(&["vm-run", "--data", "data.json", "--program", "broken.asm"], d);
    assert!(!bad_asm.status.success());
    assert!(String::from_utf8_lossy(&bad_asm.stderr).contains("line 2"));
}
