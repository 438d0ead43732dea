//! Built-in oracles: finite-difference checks of both training objectives and
//! exhaustive enumeration against beam search.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::dataio::{ContextBudget, ItemCatalog, ItemIdx, Template};
use crate::error::Result;
use crate::exec::Exec;
use crate::genmap::{beam_search, rank_order, BeamOptions, Hypothesis, StepTable};
use crate::knowledge::{content_sequence, stage1_loss, ItemEncoder, ItemEncodings, KnowledgeConfig, KnowledgePrompt};
use crate::numerics::{kernels, relative_error, Gradients, ParamStore};
use crate::pipeline::build_vocab;
use crate::reasoning::{
    stage2_loss, target_tokens, user_context, ReasoningConfig, ReasoningPrompt, Stage2Example, Stage2Options,
};
use crate::synth;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradientCheck {
    /// Named tensors checked, over both objectives.
    pub tensors: usize,
    /// Scalar entries checked.
    pub entries: usize,
    pub max_rel_err: f64,
    /// Tensor and entry holding the largest error.
    pub worst: String,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

/// Perturbs every entry of every tensor in the store selected by `store` and
/// compares the central difference of `loss` with `grads`.
fn fd_check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore<f64>,
    label: &str,
    grads: &Gradients<f64>,
    loss: &impl Fn(&M) -> Result<f64>,
    out: &mut GradientCheck,
) -> Result<()> {
    let names: Vec<String> = store(model).iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let s = store(model);
        let id = s.find(&name).expect("listed name");
        let n = s.get(id).numel();
        let analytic = grads.param(s.key(id)).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store(model).get(id).values()[i];
            store(model).get_mut(id).values_mut()[i] = orig + FD_STEP;
            let up = loss(model)?;
            store(model).get_mut(id).values_mut()[i] = orig - FD_STEP;
            let down = loss(model)?;
            store(model).get_mut(id).values_mut()[i] = orig;
            let err = relative_error(analytic[i], (up - down) / (2.0 * FD_STEP));
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = format!("{label}/{name}[{i}]");
            }
        }
        out.tensors += 1;
        out.entries += n;
    }
    Ok(())
}

/// Model shape used by the gradient check.
pub fn gradient_check_config(vocab_size: usize) -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_context: 48,
        vocab_size,
        init_std: 0.3,
    }
}

/// Analytic against numeric gradients, in 64-bit, for every stage-one
/// trainable (knowledge prompt, θ=4) and every stage-two trainable
/// (generator, domain memory and reasoning module, ρ=2) of a 2-layer, d=16
/// model.
pub fn gradient_check(seed: u64) -> Result<GradientCheck> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = ItemCatalog::new(synth::catalog(6))?;
    let vocab = build_vocab(&catalog, 1)?;
    let cfg = gradient_check_config(vocab.len());
    let encoder = Backbone::<f64>::new(cfg.clone(), 1, &mut rng)?;
    let mut prompt = KnowledgePrompt::new(KnowledgeConfig { theta: 4, d_e: 0 }, &cfg, &mut rng)?;
    prompt.store_mut().set_requires_grad(true);
    let mut out = GradientCheck {
        tensors: 0,
        entries: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        elapsed: Duration::ZERO,
    };

    let seq = content_sequence(&vocab, &catalog.get(ItemIdx(0)).content, 24).expect("non-empty content");
    let (_, grads) = stage1_loss(&prompt, &encoder, &seq, true)?;
    let loss1 = |p: &KnowledgePrompt<f64>| stage1_loss(p, &encoder, &seq, false).map(|r| r.0);
    fd_check(&mut prompt, |p| p.store_mut(), "prompt", &grads, &loss1, &mut out)?;
    prompt.store_mut().set_requires_grad(false);

    let enc = ItemEncodings::compute(&ItemEncoder::new(&encoder, &prompt, &vocab)?, &catalog, 0, Exec::Sequential)?;
    let mut generator = encoder.retagged(crate::reasoning::GENERATOR_TAG);
    let reasoning = ReasoningPrompt::new(ReasoningConfig { rho: 2, memory_rows: 4 }, cfg.d_model, Some(&prompt), &mut rng)?;
    generator.store_mut().set_requires_grad(true);
    let mut models = (generator, reasoning);
    models.1.store_mut().set_requires_grad(true);
    let opts = Stage2Options {
        template: Template::Bare,
        budget: ContextBudget {
            item_tokens: 4,
            total_tokens: 24,
        },
        history_rows: 3,
        ..Stage2Options::default()
    };
    let history = [ItemIdx(1), ItemIdx(2)];
    let ctx = user_context(&history, &catalog, &vocab, &enc, cfg.max_context, 2, &opts)?;
    let target = target_tokens(&vocab, &catalog.get(ItemIdx(3)).title, 4).expect("non-empty title");
    let ex = Stage2Example::new(ctx, &target);
    let (_, grads) = stage2_loss(&models.0, &models.1, &ex, true)?;
    let loss2 = |m: &(Backbone<f64>, ReasoningPrompt<f64>)| stage2_loss(&m.0, &m.1, &ex, false).map(|r| r.0);
    fd_check(&mut models, |m| m.0.store_mut(), "generator", &grads, &loss2, &mut out)?;
    fd_check(&mut models, |m| m.1.store_mut(), "reasoning", &grads, &loss2, &mut out)?;
    out.elapsed = start.elapsed();
    Ok(out)
}

/// Every `|V|^depth` sequence scored by summed per-step log-softmax, in rank
/// order, truncated to `width`.
pub fn enumerate_top(table: &StepTable, depth: usize, width: usize) -> Vec<Hypothesis> {
    let v = table.0[0].len();
    let lps: Vec<Vec<f64>> = (0..depth)
        .map(|i| kernels::log_softmax(&table.0[i.min(table.0.len() - 1)]))
        .collect();
    let mut all = Vec::with_capacity(v.pow(depth as u32));
    let mut tokens = vec![0u32; depth];
    loop {
        let mut score = 0.0;
        for (i, &t) in tokens.iter().enumerate() {
            score += lps[i][t as usize];
        }
        all.push(Hypothesis {
            tokens: tokens.clone(),
            logprob: score,
            finished: true,
        });
        let mut i = depth;
        loop {
            if i == 0 {
                all.sort_by(|a, b| rank_order(a.logprob, &a.tokens, b.logprob, &b.tokens));
                all.truncate(width);
                return all;
            }
            i -= 1;
            tokens[i] += 1;
            if (tokens[i] as usize) < v {
                break;
            }
            tokens[i] = 0;
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BeamOracle {
    pub cases: usize,
    pub mismatches: usize,
    /// First disagreeing case, for the log.
    pub first_mismatch: Option<String>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl BeamOracle {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Beam search against enumeration on random step-indexed tables with
/// `|V| ≤ 10`, depth ≤ 4 and width ≤ 3. Every third table draws integer
/// logits so that ties occur and the tie rule is exercised.
pub fn beam_oracle(cases: usize, seed: u64) -> Result<BeamOracle> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BeamOracle {
        cases,
        mismatches: 0,
        first_mismatch: None,
        elapsed: Duration::ZERO,
    };
    for case in 0..cases {
        let v = rng.gen_range(2..=10usize);
        let depth = rng.gen_range(1..=4usize);
        let width = rng.gen_range(1..=3usize).min(v);
        let ties = case % 3 == 2;
        let rows = (0..depth)
            .map(|_| {
                (0..v)
                    .map(|_| {
                        if ties {
                            rng.gen_range(0..3) as f64
                        } else {
                            rng.gen_range(-4.0..4.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let table = StepTable(rows);
        let opts = BeamOptions {
            width,
            max_steps: depth,
            stop: vec![],
            banned: vec![],
        };
        let got = beam_search(&table, &opts)?;
        let want = enumerate_top(&table, depth, width);
        if got != want {
            out.mismatches += 1;
            if out.first_mismatch.is_none() {
                out.first_mismatch = Some(format!("case {case}: |V|={v} depth={depth} w={width}"));
            }
        }
    }
    out.elapsed = start.elapsed();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_orders_by_score_then_tokens() {
        let t = StepTable(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let top = enumerate_top(&t, 2, 4);
        let seqs: Vec<Vec<u32>> = top.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(seqs, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]);
    }

    #[test]
    fn beam_matches_enumeration() {
        let r = beam_oracle(30, 7).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
