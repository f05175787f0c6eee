use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dynshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynshare")).args(args).output().expect("spawn dynshare")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(file: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(file)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(table: &[Vec<String>], name: &str) -> Vec<String> {
    let at = table[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    table[1..].iter().map(|r| r[at].clone()).collect()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = dynshare(&["sleep-ideal", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dynshare(&["--jobs", "0", "noise-floor"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dynshare(&["--replay", "manifest.txt", "noise-floor"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_iterations_write_only_the_summary() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("run");
    let out = dynshare(&["sleep-ideal", "--k", "3", "--gamma", "0.01", "--iters", "0", "--seeds", "1", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<String> =
        fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["manifest.txt", "summary.csv"]);
    let t = rows(&out_dir.join("summary.csv"));
    assert_eq!(column(&t, "initial"), column(&t, "terminal"));
    let floor: f64 = column(&t, "snr_floor")[0].parse().unwrap();
    assert!((floor + 9.230).abs() < 1e-3, "{floor}");
}

#[test]
fn settled_infinite_gain_matches_ideal_dynamics() {
    let dir = TempDir::new().unwrap();
    let (a, r) = (dir.path().join("ideal"), dir.path().join("rate"));
    let common = ["--k", "3", "--gamma", "0.01", "--iters", "60", "--seeds", "2"];
    let ideal = dynshare(&[&["sleep-ideal"][..], &common, &["--out", path(&a)]].concat());
    assert!(ideal.status.success());
    let rate = dynshare(
        &[
            &["sleep-rate"][..],
            &common,
            &[
                "--alpha",
                "inf",
                "--mode",
                "discrete",
                "--plasticity",
                "terminal",
                "--lr-schedule",
                "inverse_time:0.5:1000",
                "--momentum",
                "0.95",
                "--input-mean",
                "1",
                "--out",
                path(&r),
            ],
        ]
        .concat(),
    );
    assert!(rate.status.success(), "{}", String::from_utf8_lossy(&rate.stderr));
    for s in 0..2 {
        let name = format!("traj_k3_g1e-2_s{s}.csv");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(r.join(&name)).unwrap());
    }
}

#[test]
fn replay_reproduces_artifacts() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    let out = dynshare(&["sleep-ideal", "--k", "3", "--iters", "40", "--seeds", "2", "--out", path(&first)]);
    assert!(out.status.success());
    let again = dir.path().join("again");
    let out = dynshare(&["--replay", path(&first.join("manifest.txt")), "--replay-out", path(&again), "--verify"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(first.join("summary.csv")).unwrap(), fs::read(again.join("summary.csv")).unwrap());
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, "k=3\ngamma=0.01\niters=0\nseeds=1\nn=7\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = dynshare(&["sleep-ideal", "--config", path(&cfg), "--n", "5", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "n=5"));
    assert!(manifest.lines().any(|l| l == "iters=0"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, "nonsense=1\n").unwrap();
    let out = dynshare(&["sleep-ideal", "--config", path(&cfg), "--out", path(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unregularized_fixed_point_needs_enough_inputs() {
    let dir = TempDir::new().unwrap();
    let out = dynshare(&[
        "fixed-point",
        "--gamma",
        "0",
        "--inputs",
        "1",
        "--max-dim",
        "4",
        "--instances",
        "3",
        "--out",
        path(&dir.path().join("fp")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive definite"));
}

#[test]
fn tolerance_breach_exits_with_four() {
    let dir = TempDir::new().unwrap();
    let out = dynshare(&["fixed-point", "--instances", "3", "--tol", "1e-30", "--out", path(&dir.path().join("fp"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn coarse_euler_step_is_refused() {
    let dir = TempDir::new().unwrap();
    let out = dynshare(&["sleep-rate", "--dt-ms", "5", "--iters", "1", "--seeds", "1", "--k", "3", "--out", path(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unstable"));
}

#[test]
fn short_rate_run_reports_sign_fraction() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("r");
    let out = dynshare(&["sleep-rate", "--iters", "3", "--seeds", "1", "--k", "3", "--n", "10", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = rows(&out_dir.join("summary.csv"));
    let frac: f64 = column(&t, "nonnegative_fraction")[0].parse().unwrap();
    assert!((0.0..=1.0).contains(&frac));
    assert!(out_dir.join("circuit.txt").exists());
}

#[test]
fn single_step_noise_floor() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("nf");
    let out = dynshare(&["noise-floor", "--iters", "1", "--seeds", "1", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["plateaus.csv", "ratios.csv", "error_sigma0e0.csv", "error_sigma4e-1.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    // header plus iterations 0 and 1
    assert_eq!(rows(&out_dir.join("error_sigma0e0.csv")).len(), 3);
}

#[test]
fn tiny_training_run_writes_metrics() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("t");
    let out = dynshare(&[
        "train", "--arm", "lc+ws2", "--count", "48", "--size", "8", "--classes", "4", "--val", "8", "--test", "8",
        "--epochs", "1", "--milestones", "", "--batch-size", "8", "--seeds", "1", "--channels", "2", "--out",
        path(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> =
        fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(names.iter().any(|n| n.starts_with("metrics_")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("events_")), "{names:?}");
}
