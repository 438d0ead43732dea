//! Writes the deterministic-successor fixture:
//! `make_fixture <dir> [items] [users] [noise] [seed]`.

use std::path::PathBuf;

use lancer_core::dataio::{interactions_to_tsv, ItemCatalog};
use lancer_core::synth::{self, SuccessorSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("usage: make_fixture <dir> [items] [users] [noise] [seed]"));
    let mut spec = SuccessorSpec::default();
    if let Some(v) = args.next() {
        spec.items = v.parse().expect("items");
    }
    if let Some(v) = args.next() {
        spec.users = v.parse().expect("users");
    }
    if let Some(v) = args.next() {
        spec.noise = v.parse().expect("noise");
    }
    if let Some(v) = args.next() {
        spec.seed = v.parse().expect("seed");
    }
    std::fs::create_dir_all(&dir).expect("create dir");
    let catalog = ItemCatalog::new(synth::catalog(spec.items)).expect("catalog");
    std::fs::write(dir.join("catalog.jsonl"), catalog.to_jsonl()).expect("write catalog");
    let rows = synth::successor_interactions(&spec);
    std::fs::write(dir.join("interactions.tsv"), interactions_to_tsv(&rows)).expect("write interactions");
    println!("{} items, {} users, {} interactions", spec.items, spec.users, rows.len());
}
