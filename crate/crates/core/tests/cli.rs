use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vif"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(smoke_config()).arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(out: &Path) {
    ok(out, &["gen-data"]);
    ok(out, &["train", "--arm", "vif"]);
    let ck = out.join("vif.full.ckpt");
    let ck = ck.to_str().unwrap();
    ok(out, &["generate", "--checkpoint", ck, "--mode", "vif"]);
    ok(out, &["analyze", "--checkpoint", ck, "--mode", "baseline"]);
    ok(out, &["mi-check", "--trials", "12"]);
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for f in [
        "train.txt",
        "eval.txt",
        "vif.warmup.ckpt",
        "vif.full.ckpt",
        "vif.metrics.csv",
        "traces.vif.csv",
        "accuracy.vif.csv",
        "curve.baseline.csv",
        "summary.baseline.txt",
        "mi_check.csv",
    ] {
        assert!(names.iter().any(|n| n == f), "missing {f}");
    }
    for n in names {
        let x = fs::read(a.path().join(&n)).unwrap();
        let y = fs::read(b.path().join(&n)).unwrap();
        assert!(x == y, "{n:?} differs between runs");
    }
}

#[test]
fn another_seed_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    ok(a.path(), &["--seed", "2", "gen-data"]);
    let b = tempfile::tempdir().unwrap();
    ok(b.path(), &["gen-data"]);
    assert_ne!(fs::read(a.path().join("train.txt")).unwrap(), fs::read(b.path().join("train.txt")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(run(d.path(), &["train", "--arm", "nope"]).status.code(), Some(1));
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[model]\nprecision = \"f16\"\n").unwrap();
    let o = bin().arg("--config").arg(&bad).arg("--out").arg(d.path()).arg("gen-data").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let missing = d.path().join("missing.toml");
    let o = bin().arg("--config").arg(&missing).arg("gen-data").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(d.path(), &["mi-check", "--trials", "0"]).status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn contract_failures_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let junk = d.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(d.path(), &["generate", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(d.path(), &["gradcheck", "--seeds", "1", "--coords", "2", "--tolerance", "0"]);
    // finite differences never match to zero error
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    ok(d.path(), &["train", "--arm", "baseline", "--stage", "warmup"]);
    let ck = d.path().join("baseline.warmup.ckpt");
    let o = run(d.path(), &["generate", "--checkpoint", ck.to_str().unwrap(), "--mode", "vif"]);
    assert_eq!(o.status.code(), Some(1));
}
