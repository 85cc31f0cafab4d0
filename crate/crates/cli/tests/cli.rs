use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn leqg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leqg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn solve_writes_reference_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = leqg(&["solve", "--config", "table2"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    let row0: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let p0: f64 = row0[1].parse().unwrap();
    assert!((p0 - 4.5811).abs() < 5e-5, "{p0}");
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("solution.csv") && manifest.contains("sha256"));
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(leqg(&["solve"], dir.path()).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    let o = leqg(
        &["solve", "--config", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn incomplete_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.toml");
    fs::write(&path, "theta = 1.0\nhorizon = 3\n").unwrap();
    let o = leqg(&["solve", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn json_output_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = leqg(
            &["solve", "--config", "table2", "--format", "json"],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
    }
    for name in ["solution.json", "conditions.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn simulate_rejects_zero_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = leqg(
        &["simulate", "--config", "table2", "--runs", "0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = leqg(
            &[
                "simulate", "--config", "table2", "--runs", "50", "--seed", "3",
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
    }
    for name in ["trajectory.csv", "batch.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn reproduce_digest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = leqg(&["reproduce"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("deterministic columns match to 4 decimals: PASS"));
    let table = fs::read_to_string(dir.path().join("table3.csv")).unwrap();
    assert_eq!(table.lines().count(), 27);
}

#[test]
fn verify_report_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut codes = Vec::new();
    for dir in [&a, &b] {
        let o = leqg(
            &[
                "verify",
                "--config",
                "table2",
                "--seed",
                "7",
                "--samples",
                "2000",
            ],
            dir.path(),
        );
        codes.push(o.status.code());
    }
    assert_eq!(codes[0], codes[1]);
    // The value-vs-free-energy check fails on this instance, which maps to the numerical exit code.
    assert_eq!(codes[0], Some(3));
    let x = fs::read(a.path().join("oracle_report.jsonl")).unwrap();
    let y = fs::read(b.path().join("oracle_report.jsonl")).unwrap();
    assert_eq!(x, y);
    assert_eq!(String::from_utf8(x).unwrap().lines().count(), 9);
}

#[test]
fn train_writes_history_and_policy() {
    let dir = tempfile::tempdir().unwrap();
    let o = leqg(
        &["train", "--config", "table2", "--episodes", "20"],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let history = fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 20);
    assert!(history.lines().all(|l| l.contains("\"C_estimate\"")));
    assert!(dir.path().join("policy.json").exists());
}
