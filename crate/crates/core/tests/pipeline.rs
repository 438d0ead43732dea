use lancer_core::checkpoint::Checkpoint;
use lancer_core::config::RunConfig;
use lancer_core::dataio::ItemCatalog;
use lancer_core::pipeline::{self, Prepared};
use lancer_core::synth;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("layers", "2"),
        ("d_model", "32"),
        ("n_heads", "2"),
        ("d_ff", "64"),
        ("stage1_epochs", "2"),
        ("stage2_epochs", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn prepared(cfg: &RunConfig) -> Prepared {
    let rows = synth::successor_interactions(&synth::SuccessorSpec {
        items: 20,
        users: 40,
        ..Default::default()
    });
    pipeline::prepare(&rows, ItemCatalog::new(synth::catalog(20)).unwrap(), cfg).unwrap()
}

#[test]
fn stages_respect_frozen_parameters() {
    let cfg = small();
    let p = prepared(&cfg);
    let (fresh_encoder, _) = pipeline::init_stage1::<f32>(&cfg, &p.vocab).unwrap();
    let s1 = pipeline::run_stage1::<f32>(&cfg, &p).unwrap();
    assert_eq!(s1.encoder.checksum(), fresh_encoder.checksum());
    let prompt_before = s1.prompt.checksum();
    let enc = pipeline::item_encodings(&cfg, &p, &s1).unwrap();
    let s2 = pipeline::run_stage2(&cfg, &p, &s1, &enc).unwrap();
    assert_eq!(s1.prompt.checksum(), prompt_before);
    assert_ne!(s2.generator.checksum(), s1.encoder.checksum());
}

#[test]
fn seeded_runs_are_identical_and_seeds_differ() {
    let cfg = small();
    let p = prepared(&cfg);
    let a = pipeline::run_all::<f32>(&cfg, &p).unwrap();
    let b = pipeline::run_all::<f32>(&cfg, &p).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert!(a.report.recall10 >= a.report.recall5);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = pipeline::run_all::<f32>(&other, &p).unwrap();
    assert_ne!(a.report.checkpoint_hash, c.report.checkpoint_hash);
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let mut cfg = small();
    let p = prepared(&cfg);
    cfg.parallel = false;
    let seq = pipeline::run_all::<f32>(&cfg, &p).unwrap();
    cfg.parallel = true;
    let par = pipeline::run_all::<f32>(&cfg, &p).unwrap();
    assert_eq!(seq.report.to_json(), par.report.to_json());
}

#[test]
fn stage1_checkpoint_restores_bit_exactly() {
    let cfg = small();
    let p = prepared(&cfg);
    let s1 = pipeline::run_stage1::<f64>(&cfg, &p).unwrap();
    let mut ck = Checkpoint::<f64>::new("stage1", &cfg.hash(), serde_json::json!({}));
    ck.push_store("encoder", s1.encoder.store());
    ck.push_store("prompt", s1.prompt.store());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let (mut enc, mut prompt) = pipeline::init_stage1::<f64>(&cfg, &p.vocab).unwrap();
    loaded.restore_store("prompt", prompt.store_mut()).unwrap();
    loaded.restore_store("encoder", enc.store_mut()).unwrap();
    assert_eq!(prompt.checksum(), s1.prompt.checksum());
    assert_eq!(pipeline::prompt_hash(&pipeline::Stage1 { encoder: enc, prompt, report: s1.report.clone() }), pipeline::prompt_hash(&s1));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(Checkpoint::<f64>::load(&path).unwrap_err().category(), "corrupt");
}
