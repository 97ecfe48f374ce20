use std::path::Path;
use std::process::{Command, Output};

fn medlego(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medlego")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .trim()
        .to_string()
}

fn train(dir: &Path, name: &str, task_seed: u64, classes: u64, seed: u64) -> (String, Output) {
    let out = dir.join(name);
    let o = medlego(&[
        "train",
        "--task-seed",
        &task_seed.to_string(),
        "--classes",
        &classes.to_string(),
        "--epochs",
        "3",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (out.to_str().unwrap().to_string(), o)
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        vec!["train", "--rank", "0", "--out", "x.mlgo"],
        vec!["train", "--classes", "9", "--out", "x.mlgo"],
        vec!["train", "--lr", "-1", "--out", "x.mlgo"],
        vec!["merge", "--inputs", "a.mlgo", "--threshold", "1.5", "--out", "m.mlgo"],
        vec!["merge", "--inputs", "a.mlgo", "--threshold", "0", "--out", "m.mlgo"],
        vec!["merge", "--out", "m.mlgo"],
        vec!["bench", "--jobs", "0", "--out", "b"],
        vec!["frobnicate"],
    ] {
        let o = medlego(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mlgo");
    let o = medlego(&["inspect", "--input", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "));

    let junk = dir.path().join("junk.mlgo");
    std::fs::write(&junk, b"not an adapter file at all").unwrap();
    let o = medlego(&["eval", "--adapters", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval_reports_the_same_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (path, o) = train(dir.path(), "a.mlgo", 3, 3, 1);
    let text = stdout(&o);
    let acc = field(&text, "acc=");
    assert!(Path::new(&path).with_extension("csv").exists());

    let e = medlego(&["eval", "--adapters", &path, "--task-seed", "3", "--classes", "3"]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(field(&stdout(&e), "acc="), acc);

    // Same flags, same bytes.
    let (again, _) = train(dir.path(), "b.mlgo", 3, 3, 1);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    // A head for the wrong class count is a runtime error.
    let e = medlego(&["eval", "--adapters", &path, "--task-seed", "3", "--classes", "2"]);
    assert_eq!(e.status.code(), Some(1));
}

#[test]
fn merge_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train(dir.path(), "a.mlgo", 1, 2, 0);
    let (b, _) = train(dir.path(), "b.mlgo", 2, 4, 0);
    let out = dir.path().join("m.mlgo");
    let o = medlego(&["merge", "--inputs", &a, &b, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("kept_rank="));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 4);

    let i = medlego(&["inspect", "--input", out.to_str().unwrap()]);
    assert!(i.status.success(), "{}", stderr(&i));
    let text = stdout(&i);
    assert!(text.contains("head none"));
    assert_eq!(text.lines().filter(|l| l.starts_with("rank ")).count(), 4);
    assert_eq!(text.lines().filter(|l| l.starts_with("spectrum ")).count(), 4);

    let fresh = medlego(&["inspect", "--input", &a]);
    let text = stdout(&fresh);
    assert!(text.contains("base_params=24896"), "{text}");
    assert!(text.contains("adapter_params=1040"), "{text}");
}

#[test]
fn merging_a_single_file_works() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train(dir.path(), "a.mlgo", 4, 2, 0);
    let out = dir.path().join("one.mlgo");
    let report = dir.path().join("r.json");
    let o = medlego(&[
        "merge",
        "--inputs",
        &a,
        "--method",
        "task-arith",
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(report.exists());
}

#[test]
fn signature_mismatch_names_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train(dir.path(), "a.mlgo", 1, 2, 0);
    let b = dir.path().join("other.mlgo");
    let o = medlego(&["train", "--backbone-seed", "5", "--epochs", "1", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    let o = medlego(&["merge", "--inputs", &a, b.to_str().unwrap(), "--out", dir.path().join("m.mlgo").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("a.mlgo") && err.contains("other.mlgo"), "{err}");
}

#[test]
fn gap_demo_distinguishes_identical_inputs() {
    let same = medlego(&["gap-demo", "--identical"]);
    assert!(same.status.success(), "{}", stderr(&same));
    let gap: f64 = field(&stdout(&same), "gap=").parse().unwrap();
    assert_eq!(gap, 0.0);

    let diff = medlego(&["gap-demo", "--seed", "3"]);
    assert!(diff.status.success(), "{}", stderr(&diff));
    let gap: f64 = field(&stdout(&diff), "gap=").parse().unwrap();
    assert!(gap > 1e-6);
}

#[test]
fn tiny_bench_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = medlego(&["bench", "--suite", "tiny", "--jobs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("summary.md").exists());
    assert!(out.join("cross_domain.csv").exists());
}
