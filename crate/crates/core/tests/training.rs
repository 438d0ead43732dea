use lancer_core::config::RunConfig;
use lancer_core::dataio::ItemCatalog;
use lancer_core::pipeline::{self, build_vocab};
use lancer_core::synth;

fn stage1_on(items: usize, cfg: &RunConfig) -> lancer_core::knowledge::Stage1Report {
    let catalog = ItemCatalog::new(synth::catalog(items)).unwrap();
    let rows = synth::successor_interactions(&synth::SuccessorSpec {
        items,
        users: 20,
        ..Default::default()
    });
    let p = pipeline::prepare(&rows, catalog, cfg).unwrap();
    assert_eq!(p.vocab, build_vocab(&p.catalog, cfg.min_freq).unwrap());
    pipeline::run_stage1::<f32>(cfg, &p).unwrap().report
}

#[test]
fn stage1_halves_content_nll_on_twenty_items() {
    let cfg = RunConfig::default();
    let r = stage1_on(20, &cfg);
    eprintln!("stage1 nll {:.4} -> {:.4} {:?}", r.initial_nll, r.final_nll, r.epoch_nll);
    assert_eq!(r.epoch_nll.len(), 30);
    assert!(r.final_nll < 0.5 * r.initial_nll, "{} vs {}", r.final_nll, r.initial_nll);
}

#[test]
fn stage1_loss_is_nearly_monotone_on_five_items() {
    let cfg = RunConfig::default();
    let r = stage1_on(5, &cfg);
    let rises = r.epoch_nll.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "{:?}", r.epoch_nll);
}
