//! The end-to-end flow shared by the command line and the tests: ingest,
//! stage one, item encodings, stage two, item index, evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xxhash_rust::xxh64::Xxh64;

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::dataio::{
    apply_length_rules, dataset_stats, group_interactions, split_leave_one_out, template_text, DatasetStats,
    Interaction, InteractionSequence, ItemCatalog, ItemIdx,
};
use crate::error::Result;
use crate::evalkit::{evaluate, MetricsReport, UserResult};
use crate::genmap::{recommend, ItemIndex, RecommendOptions, Recommendation};
use crate::knowledge::{train_stage1, ItemEncoder, ItemEncodings, KnowledgePrompt, Stage1Report};
use crate::numerics::Real;
use crate::reasoning::{train_stage2, user_context, ReasoningPrompt, Stage2Report, GENERATOR_TAG};
use crate::textproc::Vocab;

pub const ENCODER_TAG: u32 = 1;

/// Independent random stream per purpose, all derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Encoder = 1,
    Prompt = 2,
    Stage1 = 3,
    Reasoning = 4,
    Stage2 = 5,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// Ingested and split data with its vocabulary.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub catalog: ItemCatalog,
    pub vocab: Vocab,
    pub data: Vec<InteractionSequence>,
    pub stats: DatasetStats,
}

/// Vocabulary over titles, contents and template words.
pub fn build_vocab(catalog: &ItemCatalog, min_freq: u64) -> Result<Vocab> {
    let template = template_text();
    let corpus = catalog
        .items()
        .iter()
        .flat_map(|it| [it.title.as_str(), it.content.as_str()])
        .chain(std::iter::once(template.as_str()));
    Vocab::build(corpus, min_freq)
}

pub fn prepare(rows: &[Interaction], catalog: ItemCatalog, cfg: &RunConfig) -> Result<Prepared> {
    let seqs = group_interactions(rows, &catalog)?;
    let seqs = apply_length_rules(seqs, cfg.length_rule());
    let stats = dataset_stats(&seqs, &catalog)?;
    let data = seqs.into_iter().map(split_leave_one_out).collect::<Result<Vec<_>>>()?;
    let vocab = build_vocab(&catalog, cfg.min_freq)?;
    Ok(Prepared {
        catalog,
        vocab,
        data,
        stats,
    })
}

/// Frozen encoder plus the trained knowledge prompt.
#[derive(Clone, Debug)]
pub struct Stage1<T> {
    pub encoder: Backbone<T>,
    pub prompt: KnowledgePrompt<T>,
    pub report: Stage1Report,
}

/// Fresh (untrained) stage-one models.
pub fn init_stage1<T: Real>(cfg: &RunConfig, vocab: &Vocab) -> Result<(Backbone<T>, KnowledgePrompt<T>)> {
    let encoder = Backbone::new(cfg.backbone(vocab.len()), ENCODER_TAG, &mut rng(cfg.seed, Stream::Encoder))?;
    let prompt = KnowledgePrompt::new(cfg.knowledge(), encoder.config(), &mut rng(cfg.seed, Stream::Prompt))?;
    Ok((encoder, prompt))
}

pub fn run_stage1<T: Real>(cfg: &RunConfig, p: &Prepared) -> Result<Stage1<T>> {
    let (encoder, mut prompt) = init_stage1(cfg, &p.vocab)?;
    let report = train_stage1(
        &mut prompt,
        &encoder,
        &p.catalog,
        &p.vocab,
        &cfg.stage1(),
        cfg.exec(),
        &mut rng(cfg.seed, Stream::Stage1),
    )?;
    Ok(Stage1 {
        encoder,
        prompt,
        report,
    })
}

pub fn prompt_hash<T: Real>(s1: &Stage1<T>) -> u64 {
    combine(&[s1.encoder.checksum(), s1.prompt.checksum()])
}

pub fn item_encodings<T: Real>(cfg: &RunConfig, p: &Prepared, s1: &Stage1<T>) -> Result<ItemEncodings<T>> {
    let enc = ItemEncoder::new(&s1.encoder, &s1.prompt, &p.vocab)?;
    ItemEncodings::compute(&enc, &p.catalog, prompt_hash(s1), cfg.exec())
}

/// Trained generator and reasoning prompt.
#[derive(Clone, Debug)]
pub struct Stage2<T> {
    pub generator: Backbone<T>,
    pub reasoning: ReasoningPrompt<T>,
    pub report: Stage2Report,
}

/// Generator copied from the encoder; reasoning prompt seeded from the
/// knowledge embeddings.
pub fn init_stage2<T: Real>(cfg: &RunConfig, s1: &Stage1<T>) -> Result<(Backbone<T>, ReasoningPrompt<T>)> {
    let generator = s1.encoder.retagged(GENERATOR_TAG);
    let reasoning = ReasoningPrompt::new(
        cfg.reasoning(),
        cfg.d_model,
        Some(&s1.prompt),
        &mut rng(cfg.seed, Stream::Reasoning),
    )?;
    Ok((generator, reasoning))
}

pub fn run_stage2<T: Real>(cfg: &RunConfig, p: &Prepared, s1: &Stage1<T>, enc: &ItemEncodings<T>) -> Result<Stage2<T>> {
    let (mut generator, mut reasoning) = init_stage2(cfg, s1)?;
    let report = train_stage2(
        &mut generator,
        &mut reasoning,
        &p.data,
        &p.catalog,
        &p.vocab,
        enc,
        &cfg.stage2(),
        cfg.exec(),
        &mut rng(cfg.seed, Stream::Stage2),
    )?;
    generator.store_mut().set_requires_grad(false);
    reasoning.store_mut().set_requires_grad(false);
    Ok(Stage2 {
        generator,
        reasoning,
        report,
    })
}

pub fn model_hash<T: Real>(generator: &Backbone<T>, reasoning: &ReasoningPrompt<T>) -> String {
    format!("{:016x}", combine(&[generator.checksum(), reasoning.checksum()]))
}

fn combine(parts: &[u64]) -> u64 {
    let mut h = Xxh64::new(0);
    for p in parts {
        h.update(&p.to_le_bytes());
    }
    h.digest()
}

pub fn build_index<T: Real>(cfg: &RunConfig, p: &Prepared, generator: &Backbone<T>) -> Result<ItemIndex> {
    ItemIndex::build(&p.catalog, &p.vocab, generator.token_embeddings(), cfg.item_tokens)
}

/// Everything needed to recommend.
pub struct Recommender<'m, T> {
    pub cfg: &'m RunConfig,
    pub catalog: &'m ItemCatalog,
    pub vocab: &'m Vocab,
    pub encodings: &'m ItemEncodings<T>,
    pub generator: &'m Backbone<T>,
    pub reasoning: &'m ReasoningPrompt<T>,
    pub index: &'m ItemIndex,
}

impl<T: Real> Recommender<'_, T> {
    pub fn recommend(&self, history: &[ItemIdx], k: usize) -> Result<Vec<Recommendation>> {
        let ctx = user_context(
            history,
            self.catalog,
            self.vocab,
            self.encodings,
            self.generator.config().max_context,
            self.reasoning.config().rho,
            &self.cfg.stage2(),
        )?;
        let opts = RecommendOptions {
            k,
            width: if self.cfg.beam_width == 0 { k + 5 } else { self.cfg.beam_width },
            max_steps: self.cfg.max_steps,
            decoder: self.cfg.decoder,
        };
        recommend(self.generator, self.reasoning, &ctx, self.index, self.vocab, &opts)
    }

    /// All-ranking evaluation on every user's test target.
    pub fn evaluate(&self, data: &[InteractionSequence]) -> Vec<UserResult> {
        let k = self.cfg.max_k();
        evaluate(data, self.cfg.exec(), |seq| {
            Ok(self.recommend(seq.test_history(), k)?.into_iter().map(|r| r.item).collect())
        })
    }
}

/// Outcome of a full in-memory run.
pub struct Outcome<T> {
    pub stage1: Stage1<T>,
    pub stage2: Stage2<T>,
    pub encodings: ItemEncodings<T>,
    pub index: ItemIndex,
    pub users: Vec<UserResult>,
    pub report: MetricsReport,
}

pub fn run_all<T: Real>(cfg: &RunConfig, p: &Prepared) -> Result<Outcome<T>> {
    cfg.validate()?;
    let stage1 = run_stage1::<T>(cfg, p)?;
    let encodings = item_encodings(cfg, p, &stage1)?;
    let stage2 = run_stage2(cfg, p, &stage1, &encodings)?;
    let index = build_index(cfg, p, &stage2.generator)?;
    let rec = Recommender {
        cfg,
        catalog: &p.catalog,
        vocab: &p.vocab,
        encodings: &encodings,
        generator: &stage2.generator,
        reasoning: &stage2.reasoning,
        index: &index,
    };
    let users = rec.evaluate(&p.data);
    let report = MetricsReport::from_users(&users, cfg.seed, &model_hash(&stage2.generator, &stage2.reasoning));
    Ok(Outcome {
        stage1,
        stage2,
        encodings,
        index,
        users,
        report,
    })
}
