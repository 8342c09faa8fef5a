use std::fs;
use std::path::Path;

use retrorank::cli::run;

fn small(out: &Path) -> Vec<String> {
    [
        "--out",
        out.to_str().unwrap(),
        "--set",
        "data.n_templates=30",
        "--set",
        "data.n_reactions=200",
        "--set",
        "stage1.epochs=1",
        "--set",
        "stage2.epochs=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn cmd(words: &[&str], common: &[String]) -> i32 {
    let mut argv: Vec<String> = vec!["retrorank".into()];
    argv.extend(words.iter().map(|s| s.to_string()));
    argv.extend(common.iter().cloned());
    run(argv)
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(cmd(&["gen-data"], &small(a.path())), 0);
    assert_eq!(cmd(&["gen-data"], &small(b.path())), 0);
    for f in ["data/records.jsonl", "data/templates.txt"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(a.path().join("gen-data.resolved.cfg").exists());
}

#[test]
fn stage2_without_stage1_fails() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    assert_eq!(cmd(&["gen-data"], &c), 0);
    assert_eq!(cmd(&["curate"], &c), 0);
    assert_ne!(cmd(&["train", "--stage", "2"], &c), 0);
    assert!(!d.path().join("stage2-frozen").exists());
}

#[test]
fn unknown_inputs_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    assert_ne!(cmd(&["frobnicate"], &c), 0);
    assert_ne!(cmd(&["gen-data", "--set", "no.such.key=1"], &c), 0);
    assert_ne!(cmd(&["train", "--stage", "1", "--variant", "nope"], &c), 0);
}

#[test]
fn end_to_end_smoke() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    for words in [
        &["gen-data"][..],
        &["curate"],
        &["train", "--stage", "1"],
        &["train", "--stage", "2", "--variant", "frozen"],
        &["train", "--stage", "2", "--variant", "ema"],
        &["eval", "--stage", "1", "--preset", "f3"],
        &["eval", "--stage", "2", "--variant", "frozen"],
        &["eval", "--stage", "2", "--variant", "ema"],
        &["drift-check"],
        &["report"],
    ] {
        assert_eq!(cmd(words, &c), 0, "{words:?}");
    }
    let s1: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("stage1/eval-f3.json")).unwrap()).unwrap();
    assert!(s1.get("classifier_buckets").is_some());
    assert!(d.path().join("stage2-ema-k3/trace.bin").exists());
    assert!(d.path().join("stage2-ema-k3/drift.json").exists());
    let report = fs::read_to_string(d.path().join("report.txt")).unwrap();
    assert_eq!(report.lines().count(), 4);
}
