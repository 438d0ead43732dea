//! Stage two: user histories attend over a learned domain memory to form a
//! per-user reasoning prompt, and the generator learns to write the title of
//! the next item.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dataio::{
    render_context, template_overhead, Align, ContextBudget, InteractionSequence, ItemCatalog, ItemIdx, Template,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::knowledge::{HistoryMatrix, ItemEncodings, KnowledgePrompt};
use crate::numerics::{Adam, Gradients, Graph, LinearDecay, NodeId, ParamId, ParamStore, Real, Tensor};
use crate::textproc::{Vocab, PAD, SEP};
use crate::train;

pub const GENERATOR_TAG: u32 = 3;
pub const REASONING_TAG: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningConfig {
    /// Virtual token count ρ.
    pub rho: usize,
    /// Domain memory rows m.
    pub memory_rows: usize,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        ReasoningConfig { rho: 8, memory_rows: 32 }
    }
}

impl ReasoningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_rows == 0 {
            return Err(Error::Config("memory_rows must be at least 1".into()));
        }
        Ok(())
    }
}

/// Domain memory (`m×d` plus key/value projections) and the reasoning module
/// (query projection, `W_r: d → ρ·d`, `b_r`), held in one parameter store.
#[derive(Clone, Debug)]
pub struct ReasoningPrompt<T> {
    cfg: ReasoningConfig,
    d: usize,
    store: ParamStore<T>,
    memory: ParamId,
    w_mk: ParamId,
    w_mv: ParamId,
    w_q: ParamId,
    w_r: ParamId,
    b_r: ParamId,
}

/// Knowledge embeddings fitted to `m×d`: columns truncated or zero-padded,
/// rows tiled or truncated. `None` when there are no knowledge tokens.
fn seed_memory<T: Real>(knowledge: &Tensor<T>, m: usize, d: usize) -> Option<Vec<T>> {
    let (theta, de) = (knowledge.rows(), knowledge.cols());
    if theta == 0 {
        return None;
    }
    let mut out = vec![T::zero(); m * d];
    for r in 0..m {
        let src = knowledge.row(r % theta);
        let w = de.min(d);
        out[r * d..r * d + w].copy_from_slice(&src[..w]);
    }
    Some(out)
}

impl<T: Real> ReasoningPrompt<T> {
    /// Memory seeded from the knowledge token embeddings when there are any,
    /// otherwise drawn from `N(0, 1)`.
    pub fn new(cfg: ReasoningConfig, d: usize, knowledge: Option<&KnowledgePrompt<T>>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.memory_rows;
        let proj = 1.0 / (d as f64).sqrt();
        let memory = match knowledge.and_then(|k| seed_memory(k.embeddings(), m, d)) {
            Some(v) => Tensor::new(vec![m, d], v)?,
            None => Tensor::randn(vec![m, d], 1.0, rng),
        };
        let mut store = ParamStore::new(REASONING_TAG);
        let memory = store.add("memory", memory.tracked());
        let w_mk = store.add("memory.w_k", Tensor::randn(vec![d, d], proj, rng).tracked());
        let w_mv = store.add("memory.w_v", Tensor::randn(vec![d, d], proj, rng).tracked());
        let w_q = store.add("reason.w_q", Tensor::randn(vec![d, d], proj, rng).tracked());
        let w_r = store.add("reason.w_r", Tensor::randn(vec![d, cfg.rho * d], proj, rng).tracked());
        let b_r = store.add("reason.b_r", Tensor::zeros(vec![cfg.rho * d]).tracked());
        Ok(ReasoningPrompt {
            cfg,
            d,
            store,
            memory,
            w_mk,
            w_mv,
            w_q,
            w_r,
            b_r,
        })
    }

    pub fn config(&self) -> ReasoningConfig {
        self.cfg
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

    /// Real history rows as a graph node, selected by the mask.
    fn history_node<'a>(&self, g: &mut Graph<'a, T>, h: &'a HistoryMatrix<T>) -> Result<NodeId> {
        let real: Vec<u32> = h
            .mask
            .iter()
            .enumerate()
            .filter(|&(_, &m)| m)
            .map(|(i, _)| i as u32)
            .collect();
        if real.is_empty() {
            return Err(Error::Empty("history has no real rows".into()));
        }
        if h.rows.cols() != self.d {
            return Err(Error::Shape {
                op: "history",
                left: h.rows.shape().to_vec(),
                right: vec![h.mask.len(), self.d],
            });
        }
        let table = g.constant_ref(h.rows.shape().to_vec(), h.rows.values())?;
        g.gather(table, &real)
    }

    /// Attention weights (real rows × m) and attended outputs (real rows × d).
    fn attention<'a>(&'a self, g: &mut Graph<'a, T>, h: &'a HistoryMatrix<T>) -> Result<(NodeId, NodeId)> {
        let s = &self.store;
        let x = self.history_node(g, h)?;
        let wq = g.param(s, self.w_q);
        let q = g.matmul(x, wq)?;
        let mem = g.param(s, self.memory);
        let wk = g.param(s, self.w_mk);
        let wv = g.param(s, self.w_mv);
        let k = g.matmul(mem, wk)?;
        let v = g.matmul(mem, wv)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (self.d as f64).sqrt());
        let weights = g.softmax(scores, 1)?;
        let out = g.matmul(weights, v)?;
        Ok((weights, out))
    }

    /// `A`: mean attended output over real history rows, `1×d`.
    pub fn attend_graph<'a>(&'a self, g: &mut Graph<'a, T>, h: &'a HistoryMatrix<T>) -> Result<NodeId> {
        let (_, out) = self.attention(g, h)?;
        g.mean_rows(out)
    }

    /// `tanh(A·W_r + b_r)` reshaped to `ρ×d`.
    pub fn prompt_graph<'a>(&'a self, g: &mut Graph<'a, T>, h: &'a HistoryMatrix<T>) -> Result<NodeId> {
        let a = self.attend_graph(g, h)?;
        let wr = g.param(&self.store, self.w_r);
        let br = g.param(&self.store, self.b_r);
        let z = g.matmul(a, wr)?;
        let z = g.add_row(z, br)?;
        let z = g.tanh(z);
        g.reshape(z, vec![self.cfg.rho, self.d])
    }

    pub fn attention_weights(&self, h: &HistoryMatrix<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (w, _) = self.attention(&mut g, h)?;
        Ok(g.to_tensor(w))
    }

    pub fn attend(&self, h: &HistoryMatrix<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let a = self.attend_graph(&mut g, h)?;
        Ok(g.value(a).to_vec())
    }

    pub fn build_prompt(&self, h: &HistoryMatrix<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.prompt_graph(&mut g, h)?;
        Ok(g.to_tensor(p))
    }

    /// Overwrites a named parameter (`memory`, `memory.w_k`, `memory.w_v`,
    /// `reason.w_q`, `reason.w_r`, `reason.b_r`).
    pub fn set(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        let shape = self.store.get(id).shape().to_vec();
        self.store.load_values(name, &shape, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Options {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub template: Template,
    pub budget: ContextBudget,
    pub history_rows: usize,
    pub align: Align,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            epochs: 40,
            lr: 1e-3,
            batch: 16,
            template: Template::Default,
            budget: ContextBudget::default(),
            history_rows: crate::knowledge::HISTORY_ROWS,
            align: Align::Right,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub examples: usize,
    pub initial_nll: f64,
    pub final_nll: f64,
    pub epoch_nll: Vec<f64>,
    pub steps: usize,
    /// Pairs skipped because the target title encodes to no tokens.
    pub skipped: usize,
}

/// Everything the generator is conditioned on for one user history.
#[derive(Clone, Debug)]
pub struct UserContext<T> {
    pub history: HistoryMatrix<T>,
    pub tokens: Vec<u32>,
    /// Position shift of the tokens (see [`Align`]).
    pub offset: usize,
}

/// Renders the most recent `history_rows` items of `history` within the token
/// budget left after the virtual rows and one target title.
pub fn user_context<T: Real>(
    history: &[ItemIdx],
    catalog: &ItemCatalog,
    vocab: &Vocab,
    enc: &ItemEncodings<T>,
    generator_context: usize,
    rho: usize,
    opts: &Stage2Options,
) -> Result<UserContext<T>> {
    let recent = &history[history.len().saturating_sub(opts.history_rows)..];
    let room = generator_context.saturating_sub(rho + opts.budget.item_tokens + 1);
    let budget = ContextBudget {
        item_tokens: opts.budget.item_tokens,
        total_tokens: opts.budget.total_tokens.min(room),
    };
    let ctx = render_context(recent, catalog, vocab, opts.template, budget)?;
    let matrix = HistoryMatrix::from_encodings(recent, enc, opts.history_rows)?;
    let offset = match opts.align {
        Align::Left => 0,
        Align::Right => {
            let longest = template_overhead(vocab, opts.template) + opts.history_rows * (opts.budget.item_tokens + 1);
            longest.min(budget.total_tokens).saturating_sub(ctx.ids.len())
        }
    };
    Ok(UserContext {
        history: matrix,
        tokens: ctx.ids,
        offset,
    })
}

/// Title tokens followed by SEP, the generation format.
pub fn target_tokens(vocab: &Vocab, title: &str, item_tokens: usize) -> Option<Vec<u32>> {
    let mut ids = vocab.encode(title, item_tokens).ids;
    if ids.is_empty() {
        return None;
    }
    ids.push(SEP);
    Some(ids)
}

/// One teacher-forced training example.
#[derive(Clone, Debug)]
pub struct Stage2Example<T> {
    pub history: HistoryMatrix<T>,
    pub input: Vec<u32>,
    pub offset: usize,
    /// Same length as `input`; `PAD` everywhere except target positions.
    pub targets: Vec<u32>,
}

impl<T: Real> Stage2Example<T> {
    pub fn new(ctx: UserContext<T>, target: &[u32]) -> Self {
        let mut input = ctx.tokens;
        let c = input.len();
        input.extend_from_slice(&target[..target.len() - 1]);
        let mut targets = vec![PAD; c - 1];
        targets.extend_from_slice(target);
        Stage2Example {
            history: ctx.history,
            input,
            offset: ctx.offset,
            targets,
        }
    }
}

/// Target-title NLL of one example and, optionally, its gradients.
pub fn stage2_loss<T: Real>(
    generator: &Backbone<T>,
    reasoning: &ReasoningPrompt<T>,
    ex: &Stage2Example<T>,
    backward: bool,
) -> Result<(f64, Gradients<T>)> {
    let mut g = Graph::new();
    let prompt = reasoning.prompt_graph(&mut g, &ex.history)?;
    let out = generator.forward_graph_at(&mut g, &ex.input, None, Some(prompt), ex.offset)?;
    let loss = g.cross_entropy(out.logits, &ex.targets, PAD)?;
    let value = g.scalar(loss).as_f64();
    let grads = if backward {
        g.backward(loss)?
    } else {
        Gradients::default()
    };
    Ok((value, grads))
}

/// Training pairs from every user's training region.
pub fn stage2_examples<T: Real>(
    data: &[InteractionSequence],
    catalog: &ItemCatalog,
    vocab: &Vocab,
    enc: &ItemEncodings<T>,
    generator_context: usize,
    rho: usize,
    opts: &Stage2Options,
) -> Result<(Vec<Stage2Example<T>>, usize)> {
    let mut examples = Vec::new();
    let mut skipped = 0;
    for seq in data {
        for (history, next) in seq.training_pairs() {
            let Some(target) = target_tokens(vocab, &catalog.get(next).title, opts.budget.item_tokens) else {
                skipped += 1;
                continue;
            };
            let ctx = user_context(history, catalog, vocab, enc, generator_context, rho, opts)?;
            examples.push(Stage2Example::new(ctx, &target));
        }
    }
    Ok((examples, skipped))
}

fn mean_loss<T: Real>(
    generator: &Backbone<T>,
    reasoning: &ReasoningPrompt<T>,
    examples: &[Stage2Example<T>],
    exec: Exec,
) -> Result<f64> {
    let mut total = 0.0;
    for l in exec.map(examples, |ex| stage2_loss(generator, reasoning, ex, false)) {
        total += l?.0;
    }
    Ok(total / examples.len() as f64)
}

/// Trains the generator, domain memory and reasoning module together. The
/// knowledge prompt is not an input: its influence arrives only through the
/// precomputed history encodings.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2<T: Real>(
    generator: &mut Backbone<T>,
    reasoning: &mut ReasoningPrompt<T>,
    data: &[InteractionSequence],
    catalog: &ItemCatalog,
    vocab: &Vocab,
    enc: &ItemEncodings<T>,
    opts: &Stage2Options,
    exec: Exec,
    rng: &mut impl Rng,
) -> Result<Stage2Report> {
    if data.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let ctx_len = generator.config().max_context;
    let (examples, skipped) = stage2_examples(data, catalog, vocab, enc, ctx_len, reasoning.cfg.rho, opts)?;
    if skipped > 0 {
        log::warn!("stage 2: skipped {skipped} pairs with empty target titles");
    }
    if examples.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    generator.store_mut().set_requires_grad(true);
    reasoning.store.set_requires_grad(true);
    let mut report = Stage2Report {
        examples: examples.len(),
        skipped,
        ..Default::default()
    };
    let schedule = LinearDecay::new(opts.lr, train::total_steps(examples.len(), opts.batch, opts.epochs));
    let mut adam_g = Adam::new(generator.store());
    let mut adam_r = Adam::new(&reasoning.store);
    report.initial_nll = mean_loss(generator, reasoning, &examples, exec)?;
    log::info!("stage 2: {} pairs, initial nll {:.4}", examples.len(), report.initial_nll);
    for epoch in 0..opts.epochs {
        let order = train::shuffled(examples.len(), rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch: Vec<&Stage2Example<T>> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = {
                let (gen, rsn) = (&*generator, &*reasoning);
                train::batch_gradients(exec, &batch, |ex| stage2_loss(gen, rsn, ex, true))?
            };
            epoch_loss += loss * chunk.len() as f64;
            let lr = schedule.at(report.steps);
            generator.store_mut().zero_grad();
            generator.store_mut().accumulate(&grads);
            adam_g.step(generator.store_mut(), lr);
            reasoning.store.zero_grad();
            reasoning.store.accumulate(&grads);
            adam_r.step(&mut reasoning.store, lr);
            report.steps += 1;
        }
        let mean = epoch_loss / examples.len() as f64;
        log::info!("stage 2: epoch {} nll {:.4}", epoch + 1, mean);
        report.epoch_nll.push(mean);
    }
    generator.store_mut().zero_grad();
    reasoning.store.zero_grad();
    report.final_nll = mean_loss(generator, reasoning, &examples, exec)?;
    log::info!("stage 2: final nll {:.4}", report.final_nll);
    Ok(report)
}
