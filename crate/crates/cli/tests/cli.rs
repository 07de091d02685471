use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn deepacq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepacq")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = deepacq(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_suite(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("suite-{seed}"));
    ok(&[
        "gen-tasks", "--n-train", "4", "--n-validation", "2", "--n-test", "3", "--n-candidates", "16", "--dim", "3",
        "--seed", seed, "--out", s(&out),
    ]);
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut all = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                all.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    all.sort();
    all
}

#[test]
fn gen_tasks_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_suite(dir.path(), "3");
    let b = dir.path().join("again");
    ok(&[
        "gen-tasks", "--n-train", "4", "--n-validation", "2", "--n-test", "3", "--n-candidates", "16", "--dim", "3",
        "--seed", "3", "--out", s(&b),
    ]);
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| v.into_iter().filter(|(p, _)| p != Path::new("config.json")).collect::<Vec<_>>();
    assert_eq!(strip(files(&a)), strip(files(&b)));
    assert!(a.join("test").is_dir());
}

#[test]
fn eval_random_writes_one_row_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path(), "1");
    let out = dir.path().join("eval");
    ok(&["eval", "--suite", s(&suite), "--policy", "random", "--queries", "4", "--out", s(&out)]);
    let curve = fs::read_to_string(out.join("gap_curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert!(lines[0].starts_with("t,"), "{}", lines[0]);
    assert_eq!(lines.iter().filter(|l| l.chars().next().unwrap().is_ascii_digit()).count(), 4);
    assert!(lines.last().unwrap().starts_with("R_hat,"));
    let per_task = fs::read_to_string(out.join("per_task.csv")).unwrap();
    assert_eq!(per_task.lines().count(), 1 + 3);
}

#[test]
fn train_without_epochs_reproduces_the_pretrain_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path(), "2");
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--suite", s(&suite), "--pretrain-epochs", "5", "--out", s(&pre)]);
    let tr = dir.path().join("tr");
    let init = pre.join("checkpoint.json");
    ok(&["train", "--suite", s(&suite), "--init", s(&init), "--epochs", "0", "--queries", "3", "--out", s(&tr)]);
    assert_eq!(fs::read(&init).unwrap(), fs::read(tr.join("checkpoint.json")).unwrap());
    let log = fs::read_to_string(tr.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
}

#[test]
fn conflicting_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path(), "4");
    let out = dir.path().join("x");
    let r = deepacq(&["train", "--suite", s(&suite), "--policy", "gp", "--pretrain-epochs", "3", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("--pretrain-epochs"));
    assert!(!out.join("checkpoint.json").exists());

    let r = deepacq(&["eval", "--suite", s(&suite), "--policy", "ours", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path(), "5");
    let missing = dir.path().join("nowhere.json");
    let r = deepacq(&["eval", "--suite", s(&suite), "--checkpoint", s(&missing), "--out", s(&dir.path().join("e"))]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("nowhere.json"), "{err}");
}

#[test]
fn compare_random_only_writes_one_curve() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path(), "6");
    let out = dir.path().join("cmp");
    let stdout = ok(&["compare", "--suite", s(&suite), "--policies", "random", "--queries", "3", "--out", s(&out)]).stdout;
    let curves: Vec<_> = fs::read_dir(out.join("curves")).unwrap().collect();
    assert_eq!(curves.len(), 1);
    assert!(out.join("curves/random.csv").exists());
    assert!(String::from_utf8_lossy(&stdout).contains("random"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn compare_trains_and_loads_every_policy_kind() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path(), "7");
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--suite", s(&suite), "--policy", "dkl", "--pretrain-epochs", "3", "--out", s(&pre)]);
    let out = dir.path().join("cmp");
    ok(&[
        "compare", "--suite", s(&suite), "--policies", "ours-ucb,gp-ei,rl,metabo,random", "--load",
        s(&pre.join("checkpoint.json")), "--epochs", "2", "--pretrain-epochs", "3", "--queries", "3", "--out",
        s(&out),
    ]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7, "{summary}");
    let tests = fs::read_to_string(out.join("sign_tests.csv")).unwrap();
    assert_eq!(tests.lines().count(), 1 + 6 * 5);
}
