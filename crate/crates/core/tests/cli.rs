use std::path::Path;
use std::process::{Command, Output};

use mball::config::parse_config;

fn mball(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mball"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn worst_example_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "w.cfg",
        "experiment = worst\nweight = jacobi:mu=0.5\nn = 2..24\np = 2\n",
    );
    let out = mball(
        &["markov", "worst", "--config", "w.cfg", "--out", "o"],
        dir.path(),
    );
    let csv = std::fs::read_to_string(dir.path().join("o/worst.csv")).unwrap();
    let eigen = csv.lines().filter(|l| l.contains(",eigen-exact,")).count();
    assert_eq!(eigen, 23);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("o/worst.summary.json")).unwrap(),
    )
    .unwrap();
    let slope = summary["summary"]["slope_p2"].as_f64().unwrap();
    assert!(slope > 1.0 && slope < 2.1, "{slope}");
    // exit status mirrors the asserted checks
    let passed = summary["passed"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if passed { 0 } else { 1 }));
}

#[test]
fn csv_is_deterministic_and_hash_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "a.cfg",
        "weight = jacobi:mu=1\nn = 2..6\nsamples = 300\nseed = 9\n",
    );
    for out in ["a", "b"] {
        let o = mball(
            &["markov", "average", "--config", "a.cfg", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a/average.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/average.csv")).unwrap();
    assert_eq!(a, b);

    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("a/average.summary.json")).unwrap(),
    )
    .unwrap();
    let cfg = parse_config(summary["config"].as_str().unwrap()).unwrap();
    let hash = cfg.hash();
    assert_eq!(summary["config_hash"].as_str().unwrap(), hash);
    let text = String::from_utf8(a).unwrap();
    assert!(text
        .lines()
        .all(|l| l.ends_with(&hash) || l.ends_with("config_hash")));

    let o = mball(
        &[
            "markov", "average", "--config", "a.cfg", "--out", "c", "--seed", "10",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let c = std::fs::read(dir.path().join("c/average.csv")).unwrap();
    assert_ne!(std::fs::read(dir.path().join("b/average.csv")).unwrap(), c);
}

#[test]
fn config_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.cfg", "n = 2..4\ncolour = blue\n");
    let o = mball(&["basis", "--config", "bad.cfg", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("colour"), "{err}");

    write(dir.path(), "mu.cfg", "weight = jacobi:mu=-1\n");
    let o = mball(&["basis", "--config", "mu.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = mball(&["run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_and_basis_and_dump_rule() {
    let dir = tempfile::tempdir().unwrap();
    let mut sq = String::from("n,value\n");
    for n in 2..=16 {
        sq.push_str(&format!("{n},{}\n", n * n));
    }
    write(dir.path(), "sq.csv", &sq);
    write(dir.path(), "fit.cfg", "experiment = fit\ninput = sq.csv\n");
    let o = mball(&["run", "--config", "fit.cfg", "--out", "f"], dir.path());
    assert!(o.status.success());
    let fit = std::fs::read_to_string(dir.path().join("f/fit.csv")).unwrap();
    let row: Vec<&str> = fit.lines().nth(1).unwrap().split(',').collect();
    assert!((row[1].parse::<f64>().unwrap() - 2.0).abs() < 1e-12);

    write(dir.path(), "b.cfg", "n = 3\nweight = jacobi:mu=0\n");
    let o = mball(
        &["basis", "--config", "b.cfg", "--out", "b", "--dump-rule"],
        dir.path(),
    );
    assert!(o.status.success());
    let basis = std::fs::read_to_string(dir.path().join("b/basis.csv")).unwrap();
    assert!(basis.starts_with("element_index,alpha_0,alpha_1,coefficient,config_hash"));
    assert!(dir.path().join("b/rule.csv").exists());
}

#[test]
fn selftest_passes_and_threads_env_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mball"))
        .args(["selftest", "--out", "s"])
        .env("MBALL_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let sep = std::fs::read_to_string(dir.path().join("s/separated_set.csv")).unwrap();
    assert!(sep.starts_with("epsilon,center_index,coord_0,coord_1,config_hash"));

    let o = Command::new(env!("CARGO_BIN_EXE_mball"))
        .args(["selftest", "--out", "s"])
        .env("MBALL_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
