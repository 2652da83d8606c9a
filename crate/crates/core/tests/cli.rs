use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn laserkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laserkv"))
        .args(args)
        .output()
        .expect("spawn laserkv")
}

fn gen(dir: &Path) -> String {
    let trace = dir.join("t.lkvt").display().to_string();
    let out = laserkv(&[
        "gen-trace",
        "--tokens",
        "512",
        "--layers",
        "1",
        "--heads",
        "2",
        "--head-dim",
        "8",
        "--needle",
        "100:0.9",
        "--needle",
        "300:0.8",
        "--seed",
        "7",
        "--out",
        &trace,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    trace
}

#[test]
fn run_all_policies() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path());
    for policy in ["laser", "exact", "lsh", "window", "recursive"] {
        let report = dir.path().join(format!("{policy}.jsonl"));
        let out = laserkv(&[
            "run",
            "--trace",
            &trace,
            "--policy",
            policy,
            "--block-size",
            "128",
            "--report",
            report.to_str().unwrap(),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("needle retention"), "{stdout}");
        assert_eq!(fs::read_to_string(report).unwrap().lines().count(), 4);
    }
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path());
    let out = laserkv(&["run", "--trace", &trace, "--divisor", "1", "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("invalid config"), "{stderr}");

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "block_size = many\n").unwrap();
    let out = laserkv(&["run", "--trace", &trace, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_trace_exits_1() {
    let out = laserkv(&["run", "--trace", "/nonexistent/t.lkvt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_trace_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path());
    let mut bytes = fs::read(&trace).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    fs::write(&trace, bytes).unwrap();
    let out = laserkv(&["run", "--trace", &trace]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.spec");
    fs::write(
        &spec,
        "# small sweep\nlayers = 1\nheads = 2\nhead_dim = 8\ntokens = 512\n\
         block_size = 128, 256\nratio = 0.25\nrepetitions = 2\nmid_needles = 4\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = laserkv(&[
        "sweep",
        "--spec",
        spec.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["metrics.csv", "metrics.json", "timings.csv"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    // Header plus 5 policies x 2 configs x 2 repetitions.
    assert_eq!(csv.lines().count(), 21);

    let summary = dir.path().join("summary.csv");
    let out = laserkv(&[
        "report",
        out_dir.join("metrics.csv").to_str().unwrap(),
        "--out",
        summary.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(summary).unwrap().lines().count(), 11);
}

#[test]
fn sweep_with_invalid_point_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.spec");
    fs::write(&spec, "tokens = 256\nblock_size = 64\nalpha = 0.5, 2.0\n").unwrap();
    let out = laserkv(&[
        "sweep",
        "--spec",
        spec.to_str().unwrap(),
        "--out-dir",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
