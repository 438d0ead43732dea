//! Stage one: the knowledge prompt, learned on item content with the encoder
//! frozen, and the item/history encodings it induces.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PrefixCache, PrefixNodes};
use crate::dataio::{ItemCatalog, ItemIdx};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{Adam, Graph, LinearDecay, ParamId, ParamStore, Real, Tensor};
use crate::textproc::{Vocab, BOS, EOS, PAD};
use crate::train;

pub const PROMPT_TAG: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeConfig {
    /// Number of knowledge tokens θ.
    pub theta: usize,
    /// Knowledge token width; 0 means the model width.
    pub d_e: usize,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        KnowledgeConfig { theta: 16, d_e: 0 }
    }
}

impl KnowledgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta > 64 {
            return Err(Error::Config(format!("theta must be in 0..=64, got {}", self.theta)));
        }
        Ok(())
    }

    pub fn width(&self, d_model: usize) -> usize {
        if self.d_e == 0 {
            d_model
        } else {
            self.d_e
        }
    }
}

/// Knowledge token embeddings plus a two-layer tanh MLP that expands each
/// token into one key row and one value row for every layer.
#[derive(Clone, Debug)]
pub struct KnowledgePrompt<T> {
    cfg: KnowledgeConfig,
    layers: usize,
    d_model: usize,
    store: ParamStore<T>,
    emb: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl<T: Real> KnowledgePrompt<T> {
    pub fn new(cfg: KnowledgeConfig, backbone: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (l, d) = (backbone.layers, backbone.d_model);
        let de = cfg.width(d);
        let hidden = 2 * de;
        let out = l * 2 * d;
        let mut store = ParamStore::new(PROMPT_TAG);
        let emb = store.add("prompt.emb", Tensor::randn(vec![cfg.theta, de], 1.0, rng).tracked());
        let w1 = store.add(
            "prompt.w1",
            Tensor::randn(vec![de, hidden], 1.0 / (de as f64).sqrt(), rng).tracked(),
        );
        let b1 = store.add("prompt.b1", Tensor::zeros(vec![hidden]).tracked());
        let w2 = store.add(
            "prompt.w2",
            Tensor::randn(vec![hidden, out], 1.0 / (hidden as f64).sqrt(), rng).tracked(),
        );
        let b2 = store.add("prompt.b2", Tensor::zeros(vec![out]).tracked());
        Ok(KnowledgePrompt {
            cfg,
            layers: l,
            d_model: d,
            store,
            emb,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> KnowledgeConfig {
        self.cfg
    }

    pub fn theta(&self) -> usize {
        self.cfg.theta
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Knowledge token embeddings `θ×d_e`.
    pub fn embeddings(&self) -> &Tensor<T> {
        self.store.get(self.emb)
    }

    /// Records the expansion into `g`; layer ℓ's keys are output columns
    /// `[2ℓd, (2ℓ+1)d)` and its values the following `d` columns.
    pub fn expand_graph<'a>(&'a self, g: &mut Graph<'a, T>) -> Result<PrefixNodes> {
        let d = self.d_model;
        if self.cfg.theta == 0 {
            let layers = (0..self.layers)
                .map(|_| Ok((g.constant(vec![0, d], Vec::new())?, g.constant(vec![0, d], Vec::new())?)))
                .collect::<Result<_>>()?;
            return Ok(PrefixNodes { layers });
        }
        let s = &self.store;
        let emb = g.param(s, self.emb);
        let w1 = g.param(s, self.w1);
        let b1 = g.param(s, self.b1);
        let w2 = g.param(s, self.w2);
        let b2 = g.param(s, self.b2);
        let h = g.matmul(emb, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let out = g.matmul(h, w2)?;
        let out = g.add_row(out, b2)?;
        let layers = (0..self.layers)
            .map(|l| Ok((g.cols(out, 2 * l * d, d)?, g.cols(out, (2 * l + 1) * d, d)?)))
            .collect::<Result<_>>()?;
        Ok(PrefixNodes { layers })
    }

    pub fn expand(&self) -> Result<PrefixCache<T>> {
        let mut g = Graph::new();
        let nodes = self.expand_graph(&mut g)?;
        Ok(PrefixCache {
            layers: nodes
                .layers
                .iter()
                .map(|&(k, v)| (g.to_tensor(k), g.to_tensor(v)))
                .collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Options {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_tokens: usize,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            epochs: 30,
            lr: 1e-3,
            batch: 16,
            max_tokens: 512,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    /// Mean NLL over all usable items before the first update.
    pub initial_nll: f64,
    /// Mean NLL over all usable items after the last update.
    pub final_nll: f64,
    /// Mean training-batch NLL per epoch.
    pub epoch_nll: Vec<f64>,
    pub steps: usize,
    /// Items skipped because their content encodes to no tokens.
    pub skipped: usize,
}

/// `BOS content EOS`, truncated to `limit` tokens; `None` when the content
/// has no tokens.
pub fn content_sequence(vocab: &Vocab, content: &str, limit: usize) -> Option<Vec<u32>> {
    let body = vocab.encode(content, limit.saturating_sub(2)).ids;
    if body.is_empty() {
        return None;
    }
    let mut seq = Vec::with_capacity(body.len() + 2);
    seq.push(BOS);
    seq.extend(body);
    seq.push(EOS);
    Some(seq)
}

/// Next-token NLL of `seq` under the expanded prompt, plus gradients.
pub fn stage1_loss<T: Real>(
    prompt: &KnowledgePrompt<T>,
    encoder: &Backbone<T>,
    seq: &[u32],
    backward: bool,
) -> Result<(f64, crate::numerics::Gradients<T>)> {
    let mut g = Graph::new();
    let prefix = prompt.expand_graph(&mut g)?;
    let out = encoder.forward_graph(&mut g, &seq[..seq.len() - 1], Some(&prefix), None)?;
    let loss = g.cross_entropy(out.logits, &seq[1..], PAD)?;
    let value = g.scalar(loss).as_f64();
    let grads = if backward {
        g.backward(loss)?
    } else {
        Default::default()
    };
    Ok((value, grads))
}

fn mean_nll<T: Real>(
    prompt: &KnowledgePrompt<T>,
    encoder: &Backbone<T>,
    seqs: &[Vec<u32>],
    exec: Exec,
) -> Result<f64> {
    let losses = exec.map(seqs, |s| stage1_loss(prompt, encoder, s, false).map(|r| r.0));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / seqs.len() as f64)
}

/// Optimizes only the prompt parameters by next-token NLL over each item's
/// content. The encoder is never written to.
pub fn train_stage1<T: Real>(
    prompt: &mut KnowledgePrompt<T>,
    encoder: &Backbone<T>,
    catalog: &ItemCatalog,
    vocab: &Vocab,
    opts: &Stage1Options,
    exec: Exec,
    rng: &mut impl Rng,
) -> Result<Stage1Report> {
    if catalog.is_empty() {
        return Err(Error::Empty("catalog".into()));
    }
    let limit = opts.max_tokens.min(encoder.config().max_context + 1);
    let mut report = Stage1Report::default();
    let seqs: Vec<Vec<u32>> = catalog
        .items()
        .iter()
        .filter_map(|it| {
            let s = content_sequence(vocab, &it.content, limit);
            if s.is_none() {
                report.skipped += 1;
            }
            s
        })
        .collect();
    if report.skipped > 0 {
        log::warn!("stage 1: skipped {} items with empty content", report.skipped);
    }
    if seqs.is_empty() {
        return Err(Error::Empty("no item has usable content".into()));
    }
    prompt.store.set_requires_grad(true);
    let schedule = LinearDecay::new(opts.lr, train::total_steps(seqs.len(), opts.batch, opts.epochs));
    let mut adam = Adam::new(&prompt.store);
    report.initial_nll = mean_nll(prompt, encoder, &seqs, exec)?;
    log::info!("stage 1: initial nll {:.4}", report.initial_nll);
    for epoch in 0..opts.epochs {
        let order = train::shuffled(seqs.len(), rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch: Vec<&Vec<u32>> = chunk.iter().map(|&i| &seqs[i]).collect();
            let (loss, grads) = train::batch_gradients(exec, &batch, |s| stage1_loss(prompt, encoder, s, true))?;
            epoch_loss += loss * chunk.len() as f64;
            prompt.store.zero_grad();
            prompt.store.accumulate(&grads);
            adam.step(&mut prompt.store, schedule.at(report.steps));
            report.steps += 1;
        }
        let mean = epoch_loss / seqs.len() as f64;
        log::info!("stage 1: epoch {} nll {:.4}", epoch + 1, mean);
        report.epoch_nll.push(mean);
    }
    prompt.store.zero_grad();
    report.final_nll = mean_nll(prompt, encoder, &seqs, exec)?;
    log::info!("stage 1: final nll {:.4}", report.final_nll);
    Ok(report)
}

/// Frozen encoder plus expanded knowledge prefix, ready to encode text.
#[derive(Clone, Debug)]
pub struct ItemEncoder<'m, T> {
    encoder: &'m Backbone<T>,
    prefix: PrefixCache<T>,
    vocab: &'m Vocab,
}

impl<'m, T: Real> ItemEncoder<'m, T> {
    pub fn new(encoder: &'m Backbone<T>, prompt: &KnowledgePrompt<T>, vocab: &'m Vocab) -> Result<Self> {
        Ok(ItemEncoder {
            encoder,
            prefix: prompt.expand()?,
            vocab,
        })
    }

    /// Without any prefix (θ = 0).
    pub fn plain(encoder: &'m Backbone<T>, vocab: &'m Vocab) -> Self {
        let cfg = encoder.config();
        ItemEncoder {
            encoder,
            prefix: PrefixCache::empty(cfg.layers, cfg.d_model),
            vocab,
        }
    }

    /// Final-layer hidden state at the last content token of `BOS content`.
    pub fn encode(&self, content: &str) -> Result<Vec<T>> {
        let limit = self.encoder.config().max_context - 1;
        let body = self.vocab.encode(content, limit).ids;
        if body.is_empty() {
            return Err(Error::Empty("item content".into()));
        }
        let mut tokens = Vec::with_capacity(body.len() + 1);
        tokens.push(BOS);
        tokens.extend(body);
        let out = self.encoder.forward(&tokens, Some(&self.prefix), None)?;
        let h = out.last_hidden;
        Ok(h.row(h.rows() - 1).to_vec())
    }

    pub fn d_model(&self) -> usize {
        self.encoder.config().d_model
    }
}

/// One encoding per catalog item, in catalog order.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEncodings<T> {
    pub d: usize,
    pub rows: Vec<Vec<T>>,
    /// Hash of the prompt checkpoint the encodings came from.
    pub source: u64,
}

impl<T: Real> ItemEncodings<T> {
    pub fn compute(encoder: &ItemEncoder<'_, T>, catalog: &ItemCatalog, source: u64, exec: Exec) -> Result<Self> {
        let rows = exec
            .map(catalog.items(), |it| encoder.encode(&it.content))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(ItemEncodings {
            d: encoder.d_model(),
            rows,
            source,
        })
    }

    pub fn get(&self, idx: ItemIdx) -> &[T] {
        &self.rows[idx.index()]
    }

    /// `#source<TAB>hex` header, then `item_id<TAB>d floats` per item.
    pub fn to_tsv(&self, catalog: &ItemCatalog) -> String {
        let mut s = format!("#source\t{:016x}\n", self.source);
        for (it, row) in catalog.items().iter().zip(&self.rows) {
            s.push_str(&it.item_id);
            for v in row {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Returns `None` when the cache was produced from a different source.
    pub fn from_tsv(text: &str, catalog: &ItemCatalog, source: u64, path: &Path) -> Result<Option<Self>> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let found = header
            .strip_prefix("#source\t")
            .and_then(|h| u64::from_str_radix(h, 16).ok());
        if found != Some(source) {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(catalog.len());
        let mut d = 0;
        for (i, line) in lines.enumerate() {
            let malformed = |reason: String| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 2,
                reason,
            };
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default();
            if catalog.items().get(i).map(|it| it.item_id.as_str()) != Some(id) {
                return Err(malformed(format!("unexpected item {id:?}")));
            }
            let row = fields
                .map(|f| f.parse::<f64>().map(T::from_f64).map_err(|e| malformed(e.to_string())))
                .collect::<Result<Vec<T>>>()?;
            d = row.len();
            rows.push(row);
        }
        if rows.len() != catalog.len() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("{} encodings for {} items", rows.len(), catalog.len()),
            });
        }
        Ok(Some(ItemEncodings { d, rows, source }))
    }
}

pub const HISTORY_ROWS: usize = 10;

/// History encodings `N×d`, real rows first, then zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryMatrix<T> {
    pub rows: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> HistoryMatrix<T> {
    pub fn from_encodings(items: &[ItemIdx], enc: &ItemEncodings<T>, n: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("history".into()));
        }
        if items.len() > n {
            return Err(Error::Invalid(format!(
                "history of {} items exceeds {n} rows",
                items.len()
            )));
        }
        let mut values = vec![T::zero(); n * enc.d];
        for (i, &it) in items.iter().enumerate() {
            values[i * enc.d..(i + 1) * enc.d].copy_from_slice(enc.get(it));
        }
        let mask = (0..n).map(|i| i < items.len()).collect();
        Ok(HistoryMatrix {
            rows: Tensor::new(vec![n, enc.d], values)?,
            mask,
        })
    }

    pub fn real_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Looks up item ids and builds their history matrix.
pub fn encode_history<T: Real>(
    item_ids: &[&str],
    catalog: &ItemCatalog,
    enc: &ItemEncodings<T>,
    n: usize,
) -> Result<HistoryMatrix<T>> {
    let mut unknown = Vec::new();
    let idx: Vec<ItemIdx> = item_ids
        .iter()
        .filter_map(|id| {
            let found = catalog.lookup(id);
            if found.is_none() {
                unknown.push(id.to_string());
            }
            found
        })
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownItems(unknown));
    }
    HistoryMatrix::from_encodings(&idx, enc, n)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataio::ItemRecord;

    fn small_cfg(vocab: usize) -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_context: 64,
            vocab_size: vocab,
            init_std: 0.1,
        }
    }

    fn fixture(n: usize) -> (ItemCatalog, Vocab) {
        let genres = ["drama", "comedy", "horror"];
        let items: Vec<ItemRecord> = (0..n)
            .map(|i| ItemRecord {
                item_id: format!("i{i}"),
                title: format!("film {i}"),
                content: format!("film {i} . {} story", genres[i % 3]),
            })
            .collect();
        let cat = ItemCatalog::new(items).unwrap();
        let vocab = Vocab::build(cat.items().iter().map(|i| i.content.as_str()), 1).unwrap();
        (cat, vocab)
    }

    #[test]
    fn expansion_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig {
            vocab_size: 50,
            ..BackboneConfig::default()
        };
        let p = KnowledgePrompt::<f32>::new(KnowledgeConfig::default(), &cfg, &mut rng).unwrap();
        let cache = p.expand().unwrap();
        assert_eq!(cache.layers.len(), 4);
        for (k, v) in &cache.layers {
            assert_eq!(k.shape(), &[16, 128]);
            assert_eq!(v.shape(), &[16, 128]);
        }
        assert_eq!(cache, p.expand().unwrap());
        let zero = KnowledgePrompt::<f32>::new(KnowledgeConfig { theta: 0, d_e: 0 }, &cfg, &mut rng).unwrap();
        assert_eq!(zero.expand().unwrap().theta(), 0);
        assert!(KnowledgeConfig { theta: 65, d_e: 0 }.validate().is_err());
    }

    #[test]
    fn stage1_freezes_encoder_and_lowers_loss() {
        let (cat, vocab) = fixture(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Backbone::<f64>::new(small_cfg(vocab.len()), 1, &mut rng).unwrap();
        let before = enc.checksum();
        let mut p = KnowledgePrompt::new(KnowledgeConfig { theta: 4, d_e: 0 }, enc.config(), &mut rng).unwrap();
        let opts = Stage1Options {
            epochs: 15,
            lr: 1e-3,
            batch: 2,
            max_tokens: 512,
        };
        let r = train_stage1(&mut p, &enc, &cat, &vocab, &opts, Exec::default(), &mut rng).unwrap();
        assert_eq!(enc.checksum(), before);
        assert!(r.final_nll < r.initial_nll);
        let rises = r.epoch_nll.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
        assert!(rises <= 1, "{:?}", r.epoch_nll);
    }

    #[test]
    fn zero_lr_leaves_prompt_untouched() {
        let (cat, vocab) = fixture(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Backbone::<f32>::new(small_cfg(vocab.len()), 1, &mut rng).unwrap();
        let mut p = KnowledgePrompt::new(KnowledgeConfig { theta: 4, d_e: 0 }, enc.config(), &mut rng).unwrap();
        let before = p.checksum();
        let opts = Stage1Options {
            epochs: 2,
            lr: 0.0,
            ..Stage1Options::default()
        };
        train_stage1(&mut p, &enc, &cat, &vocab, &opts, Exec::Sequential, &mut rng).unwrap();
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn empty_catalog_and_content() {
        let (_, vocab) = fixture(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Backbone::<f32>::new(small_cfg(vocab.len()), 1, &mut rng).unwrap();
        let mut p = KnowledgePrompt::new(KnowledgeConfig { theta: 2, d_e: 0 }, enc.config(), &mut rng).unwrap();
        let empty = ItemCatalog::new(vec![]).unwrap();
        assert!(train_stage1(&mut p, &enc, &empty, &vocab, &Stage1Options::default(), Exec::Sequential, &mut rng).is_err());
        let e = ItemEncoder::new(&enc, &p, &vocab).unwrap();
        assert!(e.encode("   ").is_err());
        assert_eq!(e.encode("film 1").unwrap().len(), 16);
        assert_eq!(e.encode("film 1").unwrap(), e.encode("film 1").unwrap());
    }

    #[test]
    fn history_padding_and_compositionality() {
        let (cat, vocab) = fixture(12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Backbone::<f32>::new(small_cfg(vocab.len()), 1, &mut rng).unwrap();
        let p = KnowledgePrompt::new(KnowledgeConfig { theta: 4, d_e: 0 }, enc.config(), &mut rng).unwrap();
        let e = ItemEncoder::new(&enc, &p, &vocab).unwrap();
        let codes = ItemEncodings::compute(&e, &cat, 7, Exec::default()).unwrap();
        let ids = ["i0", "i3", "i5", "i1", "i9", "i2"];
        let h = encode_history(&ids, &cat, &codes, HISTORY_ROWS).unwrap();
        assert_eq!(h.mask, [true, true, true, true, true, true, false, false, false, false]);
        for (r, id) in ids.iter().enumerate() {
            let direct = e.encode(&cat.get(cat.lookup(id).unwrap()).content).unwrap();
            assert_eq!(h.rows.row(r), direct.as_slice());
        }
        assert!(h.rows.values()[6 * 16..].iter().all(|&v| v == 0.0));
        let ten: Vec<&str> = (0..10).map(|i| cat.items()[i].item_id.as_str()).collect();
        assert!(encode_history(&ten, &cat, &codes, HISTORY_ROWS).unwrap().mask.iter().all(|&m| m));
        assert!(encode_history(&[], &cat, &codes, HISTORY_ROWS).is_err());
        assert!(matches!(
            encode_history(&["nope"], &cat, &codes, HISTORY_ROWS),
            Err(Error::UnknownItems(_))
        ));

        let text = codes.to_tsv(&cat);
        let back = ItemEncodings::<f32>::from_tsv(&text, &cat, 7, Path::new("c.tsv")).unwrap().unwrap();
        assert_eq!(back, codes);
        assert!(ItemEncodings::<f32>::from_tsv(&text, &cat, 8, Path::new("c.tsv")).unwrap().is_none());
    }
}
