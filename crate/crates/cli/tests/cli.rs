use std::path::Path;
use std::process::{Command, Output};

use lancer_core::dataio::{interactions_to_tsv, ItemCatalog};
use lancer_core::synth::{self, SuccessorSpec};

const SMALL: &str = "layers = 2\nd_model = 32\nn_heads = 2\nd_ff = 64\nstage1_epochs = 1\nstage2_epochs = 1\n";

fn run(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lancer"))
        .args(args)
        .env("LANCER_WORKDIR", workdir)
        .output()
        .expect("run lancer")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let o = run(workdir, args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    String::from_utf8(o.stdout).unwrap()
}

/// Writes inputs under `root` and ingests them into `root/work`.
fn ingested(root: &Path) -> std::path::PathBuf {
    let spec = SuccessorSpec {
        items: 20,
        users: 40,
        ..Default::default()
    };
    let cat = root.join("catalog.jsonl");
    std::fs::write(&cat, ItemCatalog::new(synth::catalog(20)).unwrap().to_jsonl()).unwrap();
    let inter = root.join("interactions.tsv");
    std::fs::write(&inter, interactions_to_tsv(&synth::successor_interactions(&spec))).unwrap();
    let cfg = root.join("run.txt");
    std::fs::write(&cfg, SMALL).unwrap();
    let wd = root.join("work");
    ok(
        &wd,
        &[
            "ingest",
            "--config",
            cfg.to_str().unwrap(),
            "--interactions",
            inter.to_str().unwrap(),
            "--catalog",
            cat.to_str().unwrap(),
        ],
    );
    wd
}

#[test]
fn unknown_command_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["selftest", "--set", "n_heads=3"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
}

#[test]
fn stats_from_counts_prints_formatted_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["stats", "--users", "6040", "--items", "3231", "--interaction-count", "72480"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["sparsity"], "99.63%");
    assert_eq!(v["avg_user"], "12.00");
    assert_eq!(v["avg_item"], "22.43");
}

#[test]
fn stats_reads_ingested_workdir() {
    let dir = tempfile::tempdir().unwrap();
    let wd = ingested(dir.path());
    let v: serde_json::Value = serde_json::from_str(&ok(&wd, &["stats"])).unwrap();
    assert_eq!(v["num_users"], 40);
    assert_eq!(v["num_items"], 20);
}

#[test]
fn held_lock_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let wd = ingested(dir.path());
    std::fs::write(wd.join(".lock"), "").unwrap();
    let o = run(&wd, &["train-knowledge"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    std::fs::remove_file(wd.join(".lock")).unwrap();
    ok(&wd, &["train-knowledge"]);
}

#[test]
fn checkpoints_chain_and_hash_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let wd = ingested(dir.path());
    ok(&wd, &["train-knowledge"]);
    ok(&wd, &["train-reason"]);
    ok(&wd, &["build-index"]);
    ok(&wd, &["evaluate", "--detail"]);
    assert!(wd.join("detail.tsv").exists());
    let top = ok(&wd, &["recommend", "--user-history", "item0001,item0002", "--k", "3"]);
    assert_eq!(top.lines().count(), 3);
    assert!(top.starts_with("1\t"));

    let o = run(&wd, &["evaluate", "--set", "theta=8"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = run(&wd, &["evaluate", "--set", "theta=8", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("config hash"), "{}", stderr(&o));
}

#[test]
fn truncated_checkpoint_is_reported_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let wd = ingested(dir.path());
    ok(&wd, &["train-knowledge"]);
    let ckpt = wd.join("stage1.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let o = run(&wd, &["train-reason"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("corrupt"), "{}", stderr(&o));
}
