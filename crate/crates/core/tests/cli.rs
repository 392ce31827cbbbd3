use std::process::Command;

fn knowexpert() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_knowexpert"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = knowexpert().args(["train-topics", "--clusters", "2", "--out", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));
}

#[test]
fn missing_input_file_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("nowhere.jsonl");
    let out = knowexpert()
        .args(["train-topics", "--corpus", corpus.to_str().unwrap(), "--clusters", "2", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
}

#[test]
fn synth_writes_the_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = knowexpert()
        .args(["--seed", "9", "synth", "--clusters", "2", "--docs-per-cluster", "5", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["corpus.jsonl", "train.jsonl", "valid_seen.jsonl", "valid_unseen.jsonl", "doc_labels.txt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let docs = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(docs.lines().count(), 10);
}
