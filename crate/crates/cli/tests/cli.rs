use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rsd_core::report::load_report;
use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn rsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsd")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn audit_args(out: &Path, block: &str) -> Vec<String> {
    [
        "audit",
        "--embeddings",
        data("tiny_vectors.txt").to_str().unwrap(),
        "--block",
        data(block).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec()
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    rsd(&refs)
}

#[test]
fn audit_writes_a_self_consistent_report_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("thm.json");
    let mut args = audit_args(&out, "theorems.txt");
    args.extend(
        ["--k", "3", "--proxy", "topic", "--seed", "23,29,31", "--baseline", "--plot-data"].map(String::from),
    );
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let report = load_report(&out).unwrap();
    report.verify(1e-9).unwrap();
    assert_eq!(report.block_name, "theorems");
    assert_eq!((report.n, report.k), (12, 3));
    assert_eq!(report.config.seeds, vec![23, 29, 31]);
    assert_eq!(report.seed_stability.as_ref().unwrap().runs.len(), 3);
    assert!(report.baseline.is_some());
    assert!(report.proxy_source.starts_with("topic"));

    let plot = fs::read_to_string(dir.path().join("thm.plot.csv")).unwrap();
    let mut lines = plot.lines();
    assert_eq!(lines.next().unwrap(), "item,s0,s1,s2,residual_norm,dominant");
    assert_eq!(lines.count(), 12);
    let readouts = fs::read_to_string(dir.path().join("thm.readouts.csv")).unwrap();
    assert!(readouts.starts_with("direction,rank,word,cosine"));
    // item tokens are excluded from the neighbor lists
    assert!(!readouts.lines().any(|l| l.split(',').nth(2) == Some("addition")));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<Vec<u8>> = ["a.json", "b.json"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut args = audit_args(&out, "months.txt");
            args.extend(["--seed", "13"].map(String::from));
            assert_eq!(code(&run(&args)), 0);
            let mut v: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
            v["config"]["out"] = Value::Null;
            serde_json::to_vec(&v).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn dog_wolf_block_carries_a_size_warning() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dw.json");
    assert_eq!(code(&run(&audit_args(&out, "dog_wolf.txt"))), 0);
    let report = load_report(&out).unwrap();
    assert!(report.warnings.iter().any(|w| w.contains("single off-diagonal proxy edge")));
}

#[test]
fn synth_check_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = rsd(&["synth-check", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(csv_a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    for row in ["Same-geometry cross-view", "Misaligned cross-view", "Residual injection", "Pullback sanity"] {
        assert!(csv_a.contains(row), "missing row {row}");
    }
    let v: Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    let slope = v["summary"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["quantity"] == "energy slope")
        .unwrap()["value"]
        .as_f64()
        .unwrap();
    assert!((slope - 1.0).abs() <= 1e-9);
}

#[test]
fn failed_assertion_exits_5_after_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sc.json");
    let o = rsd(&["synth-check", "--steps", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Same-geometry cross-view"));
    assert!(out.exists());
}

#[test]
fn heldout_bench_expands_one_seed_to_eight() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.json");
    let o = rsd(&["heldout-bench", "--seed", "3", "--steps", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["config"]["seeds"].as_array().unwrap().len(), 8);
    assert_eq!(v["summary"]["cells"].as_array().unwrap().len(), 3 * 3 * 8);
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# audit\nk = 3\nsteps = 50\nseed = 5\n").unwrap();
    let out = dir.path().join("r.json");
    let mut args = audit_args(&out, "months.txt");
    args.extend(["--config", cfg.to_str().unwrap(), "--k", "2"].map(String::from));
    assert_eq!(code(&run(&args)), 0);
    let report = load_report(&out).unwrap();
    assert_eq!(report.k, 2);
    assert_eq!(report.config.steps, Some(50));
    assert_eq!(report.seed, 5);
}

#[test]
fn exit_codes_distinguish_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    let block = data("months.txt");
    let block = block.to_str().unwrap();

    assert_eq!(code(&rsd(&["audit", "--block", block])), 2);
    let mut args = audit_args(&out, "months.txt");
    args.extend(["--decoder", "bilinear"].map(String::from));
    assert_eq!(code(&run(&args)), 2);
    let mut args = audit_args(&out, "months.txt");
    args.extend(["--proxy", "file"].map(String::from));
    assert_eq!(code(&run(&args)), 2);

    let missing = dir.path().join("none.txt");
    assert_eq!(
        code(&rsd(&["audit", "--embeddings", missing.to_str().unwrap(), "--block", block, "--out", out.to_str().unwrap()])),
        3
    );
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "january 0.1 0.2\nfebruary 0.1 oops\n").unwrap();
    assert_eq!(
        code(&rsd(&["audit", "--embeddings", bad.to_str().unwrap(), "--block", block, "--out", out.to_str().unwrap()])),
        3
    );
    let proxy = dir.path().join("proxy.csv");
    fs::write(&proxy, "0,1.5\n1.5,0\n").unwrap();
    let mut args = audit_args(&out, "dog_wolf.txt");
    args.extend(["--proxy", "file", "--proxy-path", proxy.to_str().unwrap()].map(String::from));
    let o = run(&args);
    assert_ne!(code(&o), 0);
    assert!(!out.exists());
}

#[test]
fn proxy_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let proxy = dir.path().join("proxy.csv");
    fs::write(&proxy, "0,0.4\n0.4,0\n").unwrap();
    let out = dir.path().join("p.json");
    let mut args = audit_args(&out, "dog_wolf.txt");
    args.extend(["--proxy", "file", "--proxy-path", proxy.to_str().unwrap()].map(String::from));
    assert_eq!(code(&run(&args)), 0);
    let report = load_report(&out).unwrap();
    assert_eq!(report.matrices.a.data, vec![0.0, 0.4, 0.4, 0.0]);
}
