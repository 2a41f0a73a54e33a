use std::path::Path;
use std::process::{Command, Output};

fn poolsift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poolsift")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap_or_else(|e| panic!("{e}: {text}"))
}

const SMALL: &str = "repeats = 2\n[al]\niterations = 2\n";

#[test]
fn generate_writes_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = poolsift(&["generate", "--preset", "balanced", "--seed", "3", "--out", path(dir.path())]);
    assert!(out.status.success(), "{out:?}");
    for name in ["seed", "pool_a", "pool_b", "dev_a", "dev_b", "test_in", "test_shift"] {
        let text = std::fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap();
        assert!(text.starts_with("# D=8\n"), "{name}");
    }
}

#[test]
fn run_twice_is_byte_identical_and_compare_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, jobs) in [(&a, "1"), (&b, "3")] {
        let o = poolsift(&["run", "--config", path(&cfg), "--out", path(out), "--jobs", jobs]);
        assert!(o.status.success(), "{o:?}");
    }
    for f in ["eer.csv", "summary.csv", "histograms.csv", "comparison.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = poolsift(&["compare", path(&a)]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table, std::fs::read_to_string(a.join("comparison.csv")).unwrap());
}

#[test]
fn scorer_and_algorithm_flags_pick_one_system() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("o");
    let o = poolsift(&[
        "run", "--config", path(&cfg), "--out", path(&out), "--scorer", "random", "--algorithm", "remove", "--seed", "9",
    ]);
    assert!(o.status.success(), "{o:?}");
    let systems: std::collections::BTreeSet<String> = std::fs::read_to_string(out.join("eer.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(systems.into_iter().collect::<Vec<_>>(), ["AL_Rem_Pas", "Base", "Top"]);
    let run = std::fs::read_to_string(out.join("runs/AL_Rem_Pas/rep1/run.json")).unwrap();
    assert!(run.contains("\"seed\": 10"));
}

#[test]
fn score_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "repeats = 1\n[al]\niterations = 0\n").unwrap();
    let out = dir.path().join("o");
    assert!(poolsift(&["run", "--config", path(&cfg), "--out", path(&out)]).status.success());
    let scores = dir.path().join("s.csv");
    let model = out.join("runs/Base/rep0/model.json");
    let data = out.join("data/test_shift.csv");
    let o = poolsift(&["score", "--model", path(&model), "--data", path(&data), "--out", path(&scores)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(
        std::fs::read_to_string(&scores).unwrap(),
        std::fs::read_to_string(out.join("runs/Base/rep0/scores/test_shift.csv")).unwrap()
    );
}

#[test]
fn failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = poolsift(&["run", "--config", path(&dir.path().join("missing.toml")), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "io");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "repeats = \"three\"\n").unwrap();
    let o = poolsift(&["run", "--config", path(&bad), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "config");

    let o = poolsift(&["run", "--scorer", "entropy", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "usage");

    let o = poolsift(&["compare", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "integrity");
}
