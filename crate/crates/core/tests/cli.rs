use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_fedarena");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fedarena(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("FEDARENA_THREADS", "0")
        .output()
        .unwrap()
}

fn run_smoke(out: &Path) -> Output {
    let cfg = configs().join("smoke.toml");
    fedarena(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn smoke_run_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = run_smoke(&dir.path().join("a"));
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(run_smoke(&dir.path().join("b")).status.code(), Some(0));
    for f in [
        "rounds.csv",
        "summary.json",
        "membership.csv",
        "manifest.json",
        "config.toml",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let rounds = fs::read_to_string(dir.path().join("a/rounds.csv")).unwrap();
    assert_eq!(
        rounds.lines().next().unwrap(),
        "round,test_acc,mem_correct,mem_total,kept_count"
    );
    assert_eq!(rounds.lines().count(), 11);
}

#[test]
fn snapshot_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert_eq!(run_smoke(&first).status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["clients"], 4);
    let second = dir.path().join("second");
    let snap = first.join("config.toml");
    let out = fedarena(&[
        "run",
        "--config",
        snap.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["rounds.csv", "summary.json", "membership.csv"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn summary_matches_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_smoke(dir.path()).status.code(), Some(0));
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    let rows: Vec<Vec<f64>> = rounds
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r[2] > rows[best][2] { i } else { best });
    let accuracy = rows[best][2] / rows[best][3];

    let membership = fs::read_to_string(dir.path().join("membership.csv")).unwrap();
    let (mut tp, mut predicted, mut members) = (0.0, 0.0, 0.0);
    for line in membership.lines().skip(1) {
        let v: Vec<usize> = line.split(',').map(|x| x.parse().unwrap()).collect();
        if v[0] != rows[best][0] as usize {
            continue;
        }
        tp += (v[2] == 1 && v[3] == 1) as u8 as f64;
        predicted += v[2] as f64;
        members += v[3] as f64;
    }
    let precision = if predicted == 0.0 { 0.0 } else { tp / predicted };
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let close = |key: &str, v: f64| (summary[key].as_f64().unwrap() - v).abs() < 1e-8;
    assert!(close("attack_accuracy", accuracy));
    assert!(close("precision", precision));
    assert!(close("recall", tp / members));
    assert!(close("final_test_acc", rows.last().unwrap()[1]));
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let out = run_smoke(&file.join("sub"));
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "participation = 1.5\n").unwrap();
    let out = fedarena(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("participation"));
    fs::write(&bad, "unknown_key = 3\n").unwrap();
    let out = fedarena(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let missing = fedarena(&["run", "--config", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let run = |name: &str, seed: &str| {
        let out = fedarena(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(out.status.code(), Some(0));
        fs::read_to_string(dir.path().join(name).join("manifest.json")).unwrap()
    };
    let a = run("a", "7");
    assert!(a.contains("\"seed\": 7"));
    assert_ne!(a, run("b", "8"));
}

#[test]
fn sweep_writes_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let out = fedarena(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--sweep",
        "aggregation.rule=fedavg,median",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "aggregation.rule,attack_accuracy,precision,recall,final_test_acc"
    );
    assert_eq!(lines.len(), 3);
    assert!(dir.path().join("aggregation.rule=median/summary.json").exists());
    let bad = fedarena(&[
        "sweep",
        "--out",
        dir.path().to_str().unwrap(),
        "--sweep",
        "participation=2.0",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn theory_suite_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("theory.csv");
    let grid = configs().join("theory.toml");
    let out = fedarena(&[
        "theory",
        "--config",
        grid.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("n,m,b,sigma2,adversary,trials,empirical,bound,pass"));
    assert_eq!(text.lines().count(), 28);
    assert!(text.lines().skip(1).all(|l| l.contains(",true,")));

    let neg = dir.path().join("neg.toml");
    fs::write(&neg, "sigma2 = -0.5\n").unwrap();
    let out = fedarena(&[
        "theory",
        "--config",
        neg.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let empty = dir.path().join("empty.toml");
    fs::write(&empty, "n = []\n").unwrap();
    let empty_csv = dir.path().join("empty.csv");
    let out = fedarena(&[
        "theory",
        "--config",
        empty.to_str().unwrap(),
        "--out",
        empty_csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(fs::read_to_string(&empty_csv).unwrap().lines().count(), 1);
}

#[test]
fn selftest_passes() {
    let out = fedarena(&["selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("[PASS]")), "{text}");
}
