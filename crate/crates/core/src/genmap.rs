//! Next-item text generation and mapping of generated text onto the catalog.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::Xxh64;

use crate::backbone::{Backbone, DecodeState};
use crate::dataio::{ItemCatalog, ItemIdx};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Real, Tensor};
use crate::reasoning::{ReasoningPrompt, UserContext};
use crate::textproc::{Vocab, BOS, EOS, PAD, SEP};

/// Next-token logits for a growing sequence.
pub trait LogitSource {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// State after the context and logits for the first generated token.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Appends `token` and returns logits for the following position.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

/// Generator conditioned on a rendered context and a reasoning prompt.
pub struct GeneratorSource<'m, T> {
    pub model: &'m Backbone<T>,
    pub context: &'m [u32],
    pub offset: usize,
    pub prompt: &'m Tensor<T>,
}

impl<T: Real> LogitSource for GeneratorSource<'_, T> {
    type State = DecodeState<T>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn start(&self) -> Result<(Self::State, Vec<f64>)> {
        let (state, logits) = self.model.start_decode_at(self.context, None, Some(self.prompt), self.offset)?;
        Ok((state, logits.iter().map(|v| v.as_f64()).collect()))
    }

    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>> {
        let logits = self.model.generate_step(state, token)?;
        Ok(logits.iter().map(|v| v.as_f64()).collect())
    }
}

/// Logits that depend only on the step index: row `i` is used for the
/// `i`-th generated token, the last row repeats. Used by the oracles.
#[derive(Clone, Debug)]
pub struct StepTable(pub Vec<Vec<f64>>);

impl LogitSource for StepTable {
    type State = usize;

    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }

    fn start(&self) -> Result<(usize, Vec<f64>)> {
        Ok((0, self.0[0].clone()))
    }

    fn step(&self, state: &mut usize, _token: u32) -> Result<Vec<f64>> {
        *state += 1;
        Ok(self.0[(*state).min(self.0.len() - 1)].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, including the stop token when one was emitted.
    pub tokens: Vec<u32>,
    /// Sum of the chosen per-step log-softmax values.
    pub logprob: f64,
    /// Emitted a stop token or reached the step cap.
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens of the first generated item: everything before the first stop
    /// token.
    pub fn item_tokens(&self, stop: &[u32]) -> &[u32] {
        let end = self
            .tokens
            .iter()
            .position(|t| stop.contains(t))
            .unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

/// Ranking used everywhere hypotheses are ordered: higher score first, then
/// the lexicographically smaller token sequence (a proper prefix sorts first).
pub fn rank_order(a_score: f64, a_tokens: &[u32], b_score: f64, b_tokens: &[u32]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOptions {
    pub width: usize,
    pub max_steps: usize,
    /// Tokens that end a hypothesis.
    pub stop: Vec<u32>,
    /// Tokens never generated.
    pub banned: Vec<u32>,
}

impl BeamOptions {
    /// Generation defaults: stop at SEP or EOS, never emit PAD or BOS.
    pub fn new(width: usize) -> Self {
        BeamOptions {
            width,
            max_steps: 34,
            stop: vec![SEP, EOS],
            banned: vec![PAD, BOS],
        }
    }
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
    logprobs: Vec<f64>,
}

/// Length-synchronous beam search. At every step each live hypothesis is
/// expanded by every allowed token; finished and new candidates compete for
/// the `width` slots. Returns up to `width` hypotheses in rank order.
pub fn beam_search<S: LogitSource>(src: &S, opts: &BeamOptions) -> Result<Vec<Hypothesis>> {
    let v = src.vocab_size();
    if opts.width == 0 || opts.max_steps == 0 {
        return Err(Error::Invalid("beam width and max_steps must be at least 1".into()));
    }
    if opts.width > v {
        return Err(Error::Invalid(format!("beam width {} exceeds vocabulary size {v}", opts.width)));
    }
    let (state, logits) = src.start()?;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        },
        state,
        logprobs: kernels::log_softmax(&logits),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();

    for step in 0..opts.max_steps {
        // (parent, token, score); parent None marks an already finished entry.
        let mut pool: Vec<(Option<usize>, u32, f64, Vec<u32>)> = done
            .drain(..)
            .map(|h| (None, 0, h.logprob, h.tokens))
            .collect();
        for (p, l) in live.iter().enumerate() {
            for t in 0..v as u32 {
                if opts.banned.contains(&t) {
                    continue;
                }
                let mut tokens = l.hyp.tokens.clone();
                tokens.push(t);
                pool.push((Some(p), t, l.hyp.logprob + l.logprobs[t as usize], tokens));
            }
        }
        pool.sort_by(|a, b| rank_order(a.2, &a.3, b.2, &b.3));
        pool.truncate(opts.width);

        let last = step + 1 == opts.max_steps;
        let mut next = Vec::new();
        for (parent, t, score, tokens) in pool {
            let Some(p) = parent else {
                done.push(Hypothesis {
                    tokens,
                    logprob: score,
                    finished: true,
                });
                continue;
            };
            if last || opts.stop.contains(&t) {
                done.push(Hypothesis {
                    tokens,
                    logprob: score,
                    finished: true,
                });
                continue;
            }
            let mut state = live[p].state.clone();
            let logits = src.step(&mut state, t)?;
            next.push(Live {
                hyp: Hypothesis {
                    tokens,
                    logprob: score,
                    finished: false,
                },
                state,
                logprobs: kernels::log_softmax(&logits),
            });
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.extend(live.into_iter().map(|l| l.hyp));
    done.sort_by(|a, b| rank_order(a.logprob, &a.tokens, b.logprob, &b.tokens));
    if done.iter().all(|h| h.item_tokens(&opts.stop).is_empty()) {
        return Err(Error::Degenerate("every beam is empty after first-item truncation".into()));
    }
    Ok(done)
}

/// Argmax decoding up to the first stop token or the step cap.
pub fn greedy<S: LogitSource>(src: &S, opts: &BeamOptions) -> Result<Hypothesis> {
    sample_impl(src, opts, None::<(&mut rand_chacha::ChaCha8Rng, f64)>)
}

/// Temperature sampling; debugging aid, not used for evaluation.
pub fn sample<S: LogitSource>(src: &S, opts: &BeamOptions, rng: &mut impl Rng, temperature: f64) -> Result<Hypothesis> {
    if temperature <= 0.0 {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    sample_impl(src, opts, Some((rng, temperature)))
}

fn sample_impl<S: LogitSource, R: Rng>(src: &S, opts: &BeamOptions, mut rng: Option<(&mut R, f64)>) -> Result<Hypothesis> {
    let (mut state, mut logits) = src.start()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    };
    for step in 0..opts.max_steps.max(1) {
        for &b in &opts.banned {
            if let Some(l) = logits.get_mut(b as usize) {
                *l = f64::NEG_INFINITY;
            }
        }
        let lp = kernels::log_softmax(&logits);
        let t = match rng.as_mut() {
            None => lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                .0,
            Some((r, temp)) => {
                let w: Vec<f64> = lp.iter().map(|x| (x / *temp).exp()).collect();
                WeightedIndex::new(&w)
                    .map_err(|e| Error::Degenerate(e.to_string()))?
                    .sample(*r)
            }
        } as u32;
        hyp.tokens.push(t);
        hyp.logprob += lp[t as usize];
        if opts.stop.contains(&t) || step + 1 == opts.max_steps {
            break;
        }
        logits = src.step(&mut state, t)?;
    }
    hyp.finished = true;
    Ok(hyp)
}

/// Max-pooled token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding {
    pub gamma: Vec<f64>,
    pub count: usize,
}

/// `γ[j] = max over tokens of table[token][j]`.
pub fn pool<T: Real>(tokens: &[u32], table: &Tensor<T>) -> Result<PooledEmbedding> {
    if tokens.is_empty() {
        return Err(Error::Empty("pooling needs at least one token".into()));
    }
    let mut gamma = vec![f64::NEG_INFINITY; table.cols()];
    for &t in tokens {
        if t as usize >= table.rows() {
            return Err(Error::Index {
                what: "pool token",
                index: t as usize,
                bound: table.rows(),
            });
        }
        for (g, v) in gamma.iter_mut().zip(table.row(t as usize)) {
            *g = g.max(v.as_f64());
        }
    }
    Ok(PooledEmbedding {
        gamma,
        count: tokens.len(),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hash identifying the vocabulary and embedding table an index came from.
pub fn index_source<T: Real>(vocab: &Vocab, table: &Tensor<T>) -> u64 {
    let mut h = Xxh64::new(0);
    h.update(vocab.to_tsv().as_bytes());
    let mut buf = Vec::with_capacity(table.numel() * 8);
    for &v in table.values() {
        v.write_le(&mut buf);
    }
    h.update(&buf);
    h.digest()
}

/// One pooled title vector per catalog item, in catalog order.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemIndex {
    pub source: u64,
    pub d: usize,
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

const INDEX_MAGIC: &str = "lancer-index";

impl ItemIndex {
    pub fn from_vectors(source: u64, d: usize, ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Invalid("index ids and vectors disagree".into()));
        }
        let norms = vectors.iter().map(|v| norm(v)).collect();
        Ok(ItemIndex {
            source,
            d,
            ids,
            vectors,
            norms,
        })
    }

    pub fn build<T: Real>(catalog: &ItemCatalog, vocab: &Vocab, table: &Tensor<T>, item_tokens: usize) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::Empty("catalog".into()));
        }
        let mut empty = Vec::new();
        let mut vectors = Vec::with_capacity(catalog.len());
        for it in catalog.items() {
            let ids = vocab.encode(&it.title, item_tokens).ids;
            if ids.is_empty() {
                empty.push(it.item_id.clone());
                continue;
            }
            vectors.push(pool(&ids, table)?.gamma);
        }
        if !empty.is_empty() {
            return Err(Error::Invalid(format!("items with empty titles: {}", empty.join(", "))));
        }
        let ids = catalog.items().iter().map(|it| it.item_id.clone()).collect();
        Self::from_vectors(index_source(vocab, table), table.cols(), ids, vectors)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Cosine similarity against item `i`; zero-norm items score 0.
    pub fn cosine(&self, gamma: &[f64], gamma_norm: f64, i: usize) -> f64 {
        if self.norms[i] == 0.0 {
            return 0.0;
        }
        dot(gamma, &self.vectors[i]) / (gamma_norm * self.norms[i])
    }

    /// All similarities in index order.
    pub fn similarities(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        let n = norm(gamma);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("pooled vector has zero norm".into()));
        }
        Ok((0..self.len()).map(|i| self.cosine(gamma, n, i)).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{INDEX_MAGIC}\t{:016x}\t{}\t{}\n", self.source, self.d, self.len());
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            s.push_str(id);
            for x in v {
                let _ = write!(s, "\t{x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
        let [magic, source, d, count] = header[..] else {
            return Err(corrupt("bad header".into()));
        };
        if magic != INDEX_MAGIC {
            return Err(corrupt("not an item index".into()));
        }
        let source = u64::from_str_radix(source, 16).map_err(|e| corrupt(e.to_string()))?;
        let d: usize = d.parse().map_err(|_| corrupt("bad width".into()))?;
        let count: usize = count.parse().map_err(|_| corrupt("bad count".into()))?;
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        for line in lines {
            let mut f = line.split('\t');
            ids.push(f.next().unwrap_or_default().to_string());
            let v = f
                .map(|x| x.parse::<f64>().map_err(|e| corrupt(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != d {
                return Err(corrupt(format!("row of width {} in a width-{d} index", v.len())));
            }
            vectors.push(v);
        }
        if ids.len() != count {
            return Err(corrupt(format!("expected {count} items, found {}", ids.len())));
        }
        Self::from_vectors(source, d, ids, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Most similar item by cosine; ties go to the earliest index position.
pub fn map_to_item(gamma: &[f64], index: &ItemIndex) -> Result<(ItemIdx, f64)> {
    let sims = index.similarities(gamma)?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &s) in sims.iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok((ItemIdx(best.0 as u32), best.1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Beam,
    Backfill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: ItemIdx,
    /// Beam log-probability, or cosine similarity for backfilled items.
    pub score: f64,
    pub origin: Origin,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Beam,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecommendOptions {
    pub k: usize,
    /// Beam width; 0 means `k + 5`.
    pub width: usize,
    pub max_steps: usize,
    pub decoder: Decoder,
}

impl RecommendOptions {
    pub fn new(k: usize) -> Self {
        RecommendOptions {
            k,
            width: 0,
            max_steps: 34,
            decoder: Decoder::Beam,
        }
    }
}

/// Generates candidate titles for one user, maps each to an item, keeps each
/// item's best beam, and backfills by similarity to the top beam when fewer
/// than `k` distinct items come out.
pub fn recommend<T: Real>(
    generator: &Backbone<T>,
    reasoning: &ReasoningPrompt<T>,
    ctx: &UserContext<T>,
    index: &ItemIndex,
    vocab: &Vocab,
    opts: &RecommendOptions,
) -> Result<Vec<Recommendation>> {
    if opts.k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if ctx.history.real_rows() == 0 || ctx.tokens.is_empty() {
        return Err(Error::Empty("history".into()));
    }
    let prompt = reasoning.build_prompt(&ctx.history)?;
    let src = GeneratorSource {
        model: generator,
        context: &ctx.tokens,
        offset: ctx.offset,
        prompt: &prompt,
    };
    let width = if opts.width == 0 { opts.k + 5 } else { opts.width };
    let beam = BeamOptions {
        width: width.min(src.vocab_size()),
        max_steps: opts.max_steps,
        ..BeamOptions::new(width)
    };
    let hyps = match opts.decoder {
        Decoder::Beam => beam_search(&src, &beam)?,
        Decoder::Greedy => vec![greedy(&src, &beam)?],
    };
    let table = generator.token_embeddings();
    let mut out: Vec<Recommendation> = Vec::new();
    let mut top_gamma: Option<Vec<f64>> = None;
    for h in &hyps {
        let toks = h.item_tokens(&beam.stop);
        if toks.is_empty() {
            continue;
        }
        let pooled = pool(toks, table)?;
        let Ok((item, _)) = map_to_item(&pooled.gamma, index) else {
            continue;
        };
        top_gamma.get_or_insert(pooled.gamma);
        if out.iter().any(|r| r.item == item) {
            continue;
        }
        out.push(Recommendation {
            item,
            score: h.logprob,
            origin: Origin::Beam,
            text: vocab.decode(toks, true)?,
        });
    }
    let gamma = top_gamma.ok_or_else(|| Error::Degenerate("no beam mapped to an item".into()))?;
    if out.len() < opts.k {
        let sims = index.similarities(&gamma)?;
        let mut rest: Vec<(usize, f64)> = sims
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| !out.iter().any(|r| r.item.index() == i))
            .collect();
        rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        for (i, s) in rest.into_iter().take(opts.k - out.len()) {
            out.push(Recommendation {
                item: ItemIdx(i as u32),
                score: s,
                origin: Origin::Backfill,
                text: String::new(),
            });
        }
    }
    out.truncate(opts.k);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Logits indexed by decoding step only.
    fn plain(width: usize, steps: usize) -> BeamOptions {
        BeamOptions {
            width,
            max_steps: steps,
            stop: vec![],
            banned: vec![],
        }
    }

    #[test]
    fn width_one_is_greedy() {
        let t = StepTable(vec![vec![0.1, 2.0, -1.0], vec![3.0, 0.0, 0.5], vec![0.0, 0.0, 1.0]]);
        let b = beam_search(&t, &plain(1, 3)).unwrap();
        let g = greedy(&t, &plain(1, 3)).unwrap();
        assert_eq!(b[0].tokens, g.tokens);
        assert_eq!(b[0].tokens, vec![1, 0, 2]);
        assert!((b[0].logprob - g.logprob).abs() < 1e-12);
    }

    #[test]
    fn stop_truncation_and_errors() {
        // SEP (3) is most likely at step 1
        let mut s0 = vec![0.0; 6];
        s0[5] = 2.0;
        let mut s1 = vec![0.0; 6];
        s1[SEP as usize] = 5.0;
        let t = StepTable(vec![s0, s1]);
        let hyps = beam_search(&t, &BeamOptions::new(2)).unwrap();
        assert_eq!(hyps[0].tokens, vec![5, SEP]);
        assert_eq!(hyps[0].item_tokens(&[SEP, EOS]), &[5]);
        assert!(hyps.windows(2).all(|w| w[0].logprob >= w[1].logprob));
        assert!(beam_search(&t, &BeamOptions::new(7)).is_err());

        let mut only_sep = vec![0.0; 6];
        only_sep[SEP as usize] = 50.0;
        let t = StepTable(vec![only_sep]);
        assert!(matches!(beam_search(&t, &BeamOptions::new(1)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pool_examples() {
        let table = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0], vec![-1.0, -2.0], vec![-3.0, -4.0]]).unwrap();
        assert_eq!(pool(&[0, 1], &table).unwrap().gamma, vec![3.0, 2.0]);
        assert_eq!(pool(&[1], &table).unwrap().gamma, vec![3.0, 0.0]);
        assert_eq!(pool(&[2, 3], &table).unwrap().gamma, vec![-1.0, -2.0]);
        assert_eq!(pool(&[3, 2, 2], &table).unwrap().gamma, vec![-1.0, -2.0]);
        assert!(pool(&[], &table).is_err());
    }

    #[test]
    fn mapping_rules() {
        let idx = ItemIndex::from_vectors(
            0,
            2,
            vec!["a".into(), "b".into(), "z".into(), "c".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(map_to_item(&[0.0, 2.0], &idx).unwrap(), (ItemIdx(1), 1.0));
        assert_eq!(map_to_item(&[5.0, 0.1], &idx).unwrap().0, ItemIdx(0));
        assert_eq!(idx.similarities(&[1.0, 1.0]).unwrap()[2], 0.0);
        assert!(matches!(map_to_item(&[0.0, 0.0], &idx), Err(Error::Degenerate(_))));
        let text = idx.to_text();
        assert_eq!(ItemIndex::from_text(&text, Path::new("i")).unwrap(), idx);
        assert!(ItemIndex::from_text(&text[..text.len() - 6], Path::new("i")).is_err());
    }
}
