//! One function per subcommand. Each reads its inputs from the workdir,
//! checks their config hashes and writes its outputs back.

use lancer_core::backbone::Backbone;
use lancer_core::checkpoint::Checkpoint;
use lancer_core::config::RunConfig;
use lancer_core::dataio::{parse_interactions, DatasetStats, ItemCatalog, ItemIdx, ProcessedDataset};
use lancer_core::evalkit::{detail_tsv, MetricsReport};
use lancer_core::genmap::ItemIndex;
use lancer_core::knowledge::{ItemEncodings, Stage1Report};
use lancer_core::numerics::Real;
use lancer_core::pipeline::{self, Prepared, Recommender, Stage1, Stream};
use lancer_core::reasoning::{ReasoningPrompt, Stage2Report, GENERATOR_TAG};
use lancer_core::selftest;
use lancer_core::textproc::Vocab;
use lancer_core::{Error, Result};
use serde_json::json;

use crate::workdir::{self as wd, Workdir};

fn required<'a>(p: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a std::path::Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is not set (use --{key} or a config file)")))
}

fn stats_json(stats: &DatasetStats, hash: Option<&str>) -> Result<String> {
    let mut v = serde_json::to_value(stats.record())?;
    if let Some(h) = hash {
        v["config_hash"] = json!(h);
    }
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn ingest(cfg: &RunConfig, dir: &Workdir) -> Result<String> {
    let interactions = required(&cfg.interactions, "interactions")?;
    let catalog = ItemCatalog::load(required(&cfg.catalog, "catalog")?)?;
    let text = std::fs::read_to_string(interactions).map_err(|e| Error::Io {
        path: interactions.to_path_buf(),
        source: e,
    })?;
    let rows = parse_interactions(&text, interactions)?;
    let p = pipeline::prepare(&rows, catalog, cfg)?;
    let hash = cfg.hash();
    dir.write(wd::CONFIG, format!("# config_hash {hash}\n{}", cfg.to_text()).as_bytes())?;
    dir.write_stamped(wd::CATALOG, &hash, &p.catalog.to_jsonl())?;
    dir.write_stamped(wd::VOCAB, &hash, &p.vocab.to_tsv())?;
    ProcessedDataset::from_sequences(&p.data, &p.catalog, cfg.length_rule(), &hash).save(&dir.path(wd::DATASET))?;
    let stats = stats_json(&p.stats, Some(&hash))?;
    dir.write(wd::STATS, stats.as_bytes())?;
    Ok(stats)
}

/// Dataset statistics from explicit counts, from the ingested workdir, or
/// from the configured input files, in that order of preference.
pub fn stats(cfg: &RunConfig, dir: Option<&Workdir>, counts: Option<(u64, u64, u64)>) -> Result<String> {
    if let Some((u, i, n)) = counts {
        return stats_json(&DatasetStats::from_counts(u, i, n)?, None);
    }
    if let Some(dir) = dir.filter(|d| d.exists(wd::DATASET)) {
        let p = load_prepared(cfg, dir)?;
        return stats_json(&p.stats, Some(&cfg.hash()));
    }
    let interactions = required(&cfg.interactions, "interactions")?;
    let catalog = ItemCatalog::load(required(&cfg.catalog, "catalog")?)?;
    let text = std::fs::read_to_string(interactions).map_err(|e| Error::Io {
        path: interactions.to_path_buf(),
        source: e,
    })?;
    let p = pipeline::prepare(&parse_interactions(&text, interactions)?, catalog, cfg)?;
    stats_json(&p.stats, None)
}

pub fn load_prepared(cfg: &RunConfig, dir: &Workdir) -> Result<Prepared> {
    let hash = cfg.hash();
    let catalog = ItemCatalog::from_jsonl(&dir.read_stamped(wd::CATALOG, &hash)?, &dir.path(wd::CATALOG))?;
    let vocab = Vocab::from_tsv(&dir.read_stamped(wd::VOCAB, &hash)?, &dir.path(wd::VOCAB))?;
    let ds = ProcessedDataset::load(&dir.path(wd::DATASET))?;
    dir.check(wd::DATASET, &hash, &ds.config_hash)?;
    let data = ds.sequences(&catalog)?;
    let interactions = data.iter().map(|s| s.items.len() as u64).sum();
    let stats = DatasetStats::from_counts(data.len() as u64, catalog.len() as u64, interactions)?;
    Ok(Prepared {
        catalog,
        vocab,
        data,
        stats,
    })
}

fn load_checkpoint<T: Real>(cfg: &RunConfig, dir: &Workdir, name: &str) -> Result<Checkpoint<T>> {
    let ckpt = Checkpoint::<T>::load(&dir.path(name))?;
    dir.check(name, &cfg.hash(), &ckpt.manifest.config_hash)?;
    Ok(ckpt)
}

pub fn train_knowledge<T: Real>(cfg: &RunConfig, dir: &Workdir) -> Result<String> {
    let p = load_prepared(cfg, dir)?;
    let s1 = pipeline::run_stage1::<T>(cfg, &p)?;
    let meta = json!({
        "config": cfg.to_text(),
        "report": s1.report,
        "prompt_hash": format!("{:016x}", pipeline::prompt_hash(&s1)),
    });
    let mut ckpt = Checkpoint::<T>::new("stage1", &cfg.hash(), meta);
    ckpt.push_store("encoder", s1.encoder.store());
    ckpt.push_store("prompt", s1.prompt.store());
    ckpt.save(&dir.path(wd::STAGE1))?;
    Ok(serde_json::to_string(&json!({
        "stage": 1,
        "initial_nll": s1.report.initial_nll,
        "final_nll": s1.report.final_nll,
        "steps": s1.report.steps,
    }))? + "\n")
}

fn load_stage1<T: Real>(cfg: &RunConfig, dir: &Workdir, p: &Prepared) -> Result<Stage1<T>> {
    let ckpt = load_checkpoint::<T>(cfg, dir, wd::STAGE1)?;
    let (mut encoder, mut prompt) = pipeline::init_stage1::<T>(cfg, &p.vocab)?;
    ckpt.restore_store("encoder", encoder.store_mut())?;
    ckpt.restore_store("prompt", prompt.store_mut())?;
    let report: Stage1Report = serde_json::from_value(ckpt.manifest.meta["report"].clone())?;
    Ok(Stage1 {
        encoder,
        prompt,
        report,
    })
}

pub fn train_reason<T: Real>(cfg: &RunConfig, dir: &Workdir) -> Result<String> {
    let p = load_prepared(cfg, dir)?;
    let s1 = load_stage1::<T>(cfg, dir, &p)?;
    let enc = pipeline::item_encodings(cfg, &p, &s1)?;
    dir.write_stamped(wd::ENCODINGS, &cfg.hash(), &enc.to_tsv(&p.catalog))?;
    let s2 = pipeline::run_stage2(cfg, &p, &s1, &enc)?;
    let prompt_hash = pipeline::prompt_hash(&s1);
    let meta = json!({
        "config": cfg.to_text(),
        "report": s2.report,
        "prompt_hash": format!("{prompt_hash:016x}"),
    });
    let mut ckpt = Checkpoint::<T>::new("stage2", &cfg.hash(), meta);
    ckpt.push_store("generator", s2.generator.store());
    ckpt.push_store("reasoning", s2.reasoning.store());
    ckpt.save(&dir.path(wd::STAGE2))?;
    Ok(serde_json::to_string(&json!({
        "stage": 2,
        "examples": s2.report.examples,
        "initial_nll": s2.report.initial_nll,
        "final_nll": s2.report.final_nll,
        "steps": s2.report.steps,
    }))? + "\n")
}

/// Trained stage-two models with the hash of the prompt their history
/// encodings came from.
struct Stage2Models<T> {
    generator: Backbone<T>,
    reasoning: ReasoningPrompt<T>,
    prompt_hash: u64,
    #[allow(dead_code)]
    report: Stage2Report,
}

fn load_stage2<T: Real>(cfg: &RunConfig, dir: &Workdir, p: &Prepared) -> Result<Stage2Models<T>> {
    let ckpt = load_checkpoint::<T>(cfg, dir, wd::STAGE2)?;
    let mut generator = Backbone::<T>::new(
        cfg.backbone(p.vocab.len()),
        GENERATOR_TAG,
        &mut pipeline::rng(cfg.seed, Stream::Encoder),
    )?;
    let mut reasoning = ReasoningPrompt::<T>::new(
        cfg.reasoning(),
        cfg.d_model,
        None,
        &mut pipeline::rng(cfg.seed, Stream::Reasoning),
    )?;
    ckpt.restore_store("generator", generator.store_mut())?;
    ckpt.restore_store("reasoning", reasoning.store_mut())?;
    let meta = &ckpt.manifest.meta;
    let prompt_hash = meta["prompt_hash"]
        .as_str()
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::Corrupt {
            path: dir.path(wd::STAGE2),
            reason: "manifest lacks prompt_hash".into(),
        })?;
    Ok(Stage2Models {
        generator,
        reasoning,
        prompt_hash,
        report: serde_json::from_value(meta["report"].clone())?,
    })
}

pub fn build_index<T: Real>(cfg: &RunConfig, dir: &Workdir) -> Result<String> {
    let p = load_prepared(cfg, dir)?;
    let s2 = load_stage2::<T>(cfg, dir, &p)?;
    let index = pipeline::build_index(cfg, &p, &s2.generator)?;
    dir.write_stamped(wd::INDEX, &cfg.hash(), &index.to_text())?;
    Ok(serde_json::to_string(&json!({ "items": index.len(), "d": cfg.d_model }))? + "\n")
}

/// Everything a recommender borrows.
struct Loaded<T> {
    p: Prepared,
    enc: ItemEncodings<T>,
    s2: Stage2Models<T>,
    index: ItemIndex,
}

fn load_all<T: Real>(cfg: &RunConfig, dir: &Workdir) -> Result<Loaded<T>> {
    let hash = cfg.hash();
    let p = load_prepared(cfg, dir)?;
    let s2 = load_stage2::<T>(cfg, dir, &p)?;
    let enc_path = dir.path(wd::ENCODINGS);
    let enc = ItemEncodings::from_tsv(&dir.read_stamped(wd::ENCODINGS, &hash)?, &p.catalog, s2.prompt_hash, &enc_path)?
        .ok_or_else(|| Error::Corrupt {
            path: enc_path,
            reason: "encodings do not come from the stage-one prompt of this model".into(),
        })?;
    let index = ItemIndex::from_text(&dir.read_stamped(wd::INDEX, &hash)?, &dir.path(wd::INDEX))?;
    Ok(Loaded { p, enc, s2, index })
}

impl<T: Real> Loaded<T> {
    fn recommender<'m>(&'m self, cfg: &'m RunConfig) -> Recommender<'m, T> {
        Recommender {
            cfg,
            catalog: &self.p.catalog,
            vocab: &self.p.vocab,
            encodings: &self.enc,
            generator: &self.s2.generator,
            reasoning: &self.s2.reasoning,
            index: &self.index,
        }
    }
}

pub fn evaluate<T: Real>(cfg: &RunConfig, dir: &Workdir, detail: bool) -> Result<String> {
    let l = load_all::<T>(cfg, dir)?;
    let users = l.recommender(cfg).evaluate(&l.p.data);
    let mut report = MetricsReport::from_users(
        &users,
        cfg.seed,
        &pipeline::model_hash(&l.s2.generator, &l.s2.reasoning),
    );
    report.config_hash = cfg.hash();
    let text = report.to_json();
    dir.write(wd::METRICS, text.as_bytes())?;
    if detail {
        let tsv = detail_tsv(&users, |i| l.p.catalog.get(i).item_id.clone());
        dir.write_stamped(wd::DETAIL, &cfg.hash(), &tsv)?;
    }
    Ok(text)
}

/// `rank<TAB>item_id<TAB>score<TAB>text` per recommended item.
pub fn recommend<T: Real>(cfg: &RunConfig, dir: &Workdir, history: &[String], k: usize) -> Result<String> {
    let l = load_all::<T>(cfg, dir)?;
    let mut unknown = Vec::new();
    let items: Vec<ItemIdx> = history
        .iter()
        .filter_map(|id| {
            let found = l.p.catalog.lookup(id);
            if found.is_none() {
                unknown.push(id.clone());
            }
            found
        })
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownItems(unknown));
    }
    let recs = l.recommender(cfg).recommend(&items, k)?;
    let mut out = String::new();
    for (rank, r) in recs.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\n",
            rank + 1,
            l.p.catalog.get(r.item).item_id,
            r.score,
            r.text
        ));
    }
    Ok(out)
}

pub fn selftest(seed: u64) -> Result<String> {
    let grad = selftest::gradient_check(seed)?;
    let beam = selftest::beam_oracle(50, seed)?;
    let mut out = serde_json::to_string(&json!({
        "suite": "gradient",
        "passed": grad.passed(),
        "tensors": grad.tensors,
        "entries": grad.entries,
        "max_rel_err": grad.max_rel_err,
        "worst": grad.worst,
        "seconds": grad.elapsed.as_secs_f64(),
    }))? + "\n";
    out += &(serde_json::to_string(&json!({
        "suite": "beam",
        "passed": beam.passed(),
        "cases": beam.cases,
        "mismatches": beam.mismatches,
        "seconds": beam.elapsed.as_secs_f64(),
    }))? + "\n");
    if !grad.passed() || !beam.passed() {
        print!("{out}");
        return Err(Error::Invalid("selftest failed".into()));
    }
    Ok(out)
}
