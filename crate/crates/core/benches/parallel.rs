use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lancer_core::config::RunConfig;
use lancer_core::dataio::ItemCatalog;
use lancer_core::exec::Exec;
use lancer_core::knowledge::{ItemEncoder, ItemEncodings};
use lancer_core::pipeline;
use lancer_core::reasoning::{stage2_examples, stage2_loss};
use lancer_core::synth;

fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [("layers", "2"), ("d_model", "64"), ("d_ff", "256"), ("stage1_epochs", "0")] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn bench(c: &mut Criterion) {
    let cfg = config();
    let rows = synth::successor_interactions(&synth::SuccessorSpec::default());
    let p = pipeline::prepare(&rows, ItemCatalog::new(synth::catalog(50)).unwrap(), &cfg).unwrap();
    let s1 = pipeline::run_stage1::<f32>(&cfg, &p).unwrap();
    let enc = pipeline::item_encodings(&cfg, &p, &s1).unwrap();
    let (mut generator, mut reasoning) = pipeline::init_stage2(&cfg, &s1).unwrap();
    generator.store_mut().set_requires_grad(true);
    reasoning.store_mut().set_requires_grad(true);
    let (examples, _) = stage2_examples(
        &p.data,
        &p.catalog,
        &p.vocab,
        &enc,
        cfg.max_context,
        cfg.rho,
        &cfg.stage2(),
    )
    .unwrap();
    let batch = &examples[..cfg.batch];
    let encoder = ItemEncoder::new(&s1.encoder, &s1.prompt, &p.vocab).unwrap();

    let modes = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];
    let mut g = c.benchmark_group("stage2_batch_gradients");
    for (name, exec) in modes {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(exec.map(batch, |ex| stage2_loss(&generator, &reasoning, ex, true).unwrap().0)))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("item_encodings");
    for (name, exec) in modes {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(ItemEncodings::compute(&encoder, &p.catalog, 0, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
