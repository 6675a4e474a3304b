//! End-to-end runs of the `aan` binary: training artifacts, checkpoint
//! evaluation, verification suites, dataset generation and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_CONFIG: &str = r#"
seed = 1
epochs = 2
batch_size = 8
cell = "ran"

[model]
f = 6
f_prime = 6
max_depth = 4

[[dataset]]
name = "blobs"
kind = "gaussian-pair"
n_train = 16
n_val = 8
dim = 3
"#;

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL_CONFIG).unwrap();
    let out = aan(&["train", "run.toml", "--out", "artifacts"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = stdout(&out);
    assert!(text.starts_with("epoch,domain,split,loss,accuracy"));
    assert!(text.contains("1,blobs,train,"));
    assert!(text.contains("2,blobs,val,"));

    let csv = fs::read_to_string(dir.path().join("artifacts/metrics.csv")).unwrap();
    // header plus train and val rows for each of the two epochs
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("artifacts/model.ckpt").exists());
}

#[test]
fn zero_epochs_yields_header_only_metrics_and_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL_CONFIG.replace("epochs = 2", "epochs = 0");
    fs::write(dir.path().join("run.toml"), cfg).unwrap();
    let out = aan(&["train", "run.toml", "--out", "a"], dir.path());
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(csv.trim(), "epoch,domain,split,loss,accuracy");
    assert!(dir.path().join("a/model.ckpt").exists());
}

#[test]
fn eval_reads_the_checkpoint_back() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL_CONFIG).unwrap();
    assert!(aan(&["train", "run.toml", "--out", "a"], dir.path()).status.success());
    let out = aan(&["eval", "a/model.ckpt", "run.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("epoch,domain,split,loss,accuracy"));
    assert!(text.contains("2,blobs,val,"));
}

#[test]
fn trace_prints_tab_separated_pass_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL_CONFIG.replace("epochs = 2", "epochs = 0");
    fs::write(dir.path().join("run.toml"), cfg).unwrap();
    let out = aan(&["train", "run.toml", "--trace"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    // single-node tree: conv visit+compute, deconv compute
    assert!(text.contains("dfc\tvisit\t0\t0"), "{text}");
    assert!(text.contains("dfc\tcompute\t0\t0"), "{text}");
    assert!(text.contains("dfd\tcompute\t0\t0"), "{text}");
}

#[test]
fn cell_and_seed_overrides_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL_CONFIG).unwrap();
    let out = aan(
        &["train", "run.toml", "--out", "a", "--cell", "gau", "--seed", "9"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // the eval path rebuilds from the checkpoint's embedded config
    let out = aan(&["eval", "a/model.ckpt", "run.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "cell = \"transformer\"").unwrap();
    let out = aan(&["train", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_verify_suite_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = aan(&["verify", "nonsense"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn batching_suite_passes_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = aan(&["verify", "batching"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("pass"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn gen_data_writes_trees_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.json"),
        r#"{"name":"p","kind":{"type":"sibling-parity","dim":3},"n_train":4,"n_val":2,"seed":7}"#,
    )
    .unwrap();
    let out = aan(&["gen-data", "spec.json", "gen"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for split in ["train", "val"] {
        let labels = fs::read_to_string(dir.path().join("gen").join(split).join("labels.csv")).unwrap();
        assert!(labels.starts_with("index,label"));
    }
    // each tree file parses back into a valid tree
    let tree_text = fs::read_to_string(dir.path().join("gen/train/00000.json")).unwrap();
    let tree = aan_core::NeuroTree::from_json(&tree_text).unwrap();
    assert!(tree.validate().passed());
    assert_eq!(tree.node(tree.root()).unwrap().children.len(), 4);
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL_CONFIG).unwrap();
    fs::write(dir.path().join("junk.ckpt"), b"garbage").unwrap();
    let out = aan(&["eval", "junk.ckpt", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
