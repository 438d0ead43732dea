//! Pre-LN decoder-only transformer with two conditioning hooks: per-layer
//! key/value prefixes and input-level virtual token embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub vocab_size: usize,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_context: 512,
            vocab_size: 0,
            init_std: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_context == 0 {
            return bad("max_context must be at least 1".into());
        }
        if self.vocab_size <= crate::textproc::SPECIAL_TOKENS.len() {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_ff == 0 || !(self.init_std > 0.0) {
            return bad("d_ff and init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-layer key and value prefixes, each `θ×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> PrefixCache<T> {
    pub fn empty(layers: usize, d_model: usize) -> Self {
        PrefixCache {
            layers: (0..layers)
                .map(|_| (Tensor::zeros(vec![0, d_model]), Tensor::zeros(vec![0, d_model])))
                .collect(),
        }
    }

    pub fn theta(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    /// Places the cache into a graph as untracked constants.
    pub fn to_nodes<'a>(&'a self, g: &mut Graph<'a, T>) -> Result<PrefixNodes> {
        let layers = self
            .layers
            .iter()
            .map(|(k, v)| Ok((g.constant_ref(k.shape().to_vec(), k.values())?, g.constant_ref(v.shape().to_vec(), v.values())?)))
            .collect::<Result<_>>()?;
        Ok(PrefixNodes { layers })
    }
}

/// Prefix key/value blocks already placed in a graph.
#[derive(Clone, Debug)]
pub struct PrefixNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `T×|V|`, one row per real input token.
    pub logits: NodeId,
    /// `T×d` final-layer (post final norm) states of the real tokens.
    pub hidden: NodeId,
    /// Full per-layer keys/values including prefix and virtual rows.
    pub layer_kv: Vec<(NodeId, NodeId)>,
    /// Attention score shape `(queries, keys)` at each layer.
    pub score_shapes: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub last_hidden: Tensor<T>,
    pub score_shapes: Vec<(usize, usize)>,
}

/// Incremental decoding state: cached keys/values of every position seen so
/// far (prefix slots included).
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    signature: u64,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    cached_rows: usize,
    positions: usize,
}

impl<T> DecodeState<T> {
    /// Input positions consumed (virtual rows plus tokens).
    pub fn positions(&self) -> usize {
        self.positions
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    cfg: BackboneConfig,
    store: ParamStore<T>,
    wte: ParamId,
    wpe: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

impl<T: Real> Backbone<T> {
    /// Randomly initialized model: weights `N(0, init_std)`, biases zero,
    /// norm gains one.
    pub fn new(cfg: BackboneConfig, tag: u32, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, ff, std) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        let mut s = ParamStore::new(tag);
        let wte = s.add("wte", Tensor::randn(vec![cfg.vocab_size, d], std, rng));
        let wpe = s.add("wpe", Tensor::randn(vec![cfg.max_context, d], std, rng));
        let ones = |n: usize| Tensor::new(vec![n], vec![T::one(); n]).expect("shape");
        let zeros = |n: usize| Tensor::zeros(vec![n]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |n: &str| format!("h{l}.{n}");
            layers.push(LayerIds {
                ln1_g: s.add(p("ln1.g"), ones(d)),
                ln1_b: s.add(p("ln1.b"), zeros(d)),
                w_qkv: s.add(p("attn.w_qkv"), Tensor::randn(vec![d, 3 * d], std, rng)),
                b_qkv: s.add(p("attn.b_qkv"), zeros(3 * d)),
                w_o: s.add(p("attn.w_o"), Tensor::randn(vec![d, d], std, rng)),
                b_o: s.add(p("attn.b_o"), zeros(d)),
                ln2_g: s.add(p("ln2.g"), ones(d)),
                ln2_b: s.add(p("ln2.b"), zeros(d)),
                w_fc: s.add(p("mlp.w_fc"), Tensor::randn(vec![d, ff], std, rng)),
                b_fc: s.add(p("mlp.b_fc"), zeros(ff)),
                w_proj: s.add(p("mlp.w_proj"), Tensor::randn(vec![ff, d], std, rng)),
                b_proj: s.add(p("mlp.b_proj"), zeros(d)),
            });
        }
        let lnf_g = s.add("lnf.g", ones(d));
        let lnf_b = s.add("lnf.b", zeros(d));
        Ok(Backbone {
            cfg,
            store: s,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
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

    /// Copy of this model whose parameters are addressed under `tag`.
    pub fn retagged(&self, tag: u32) -> Self {
        let mut out = self.clone();
        out.store = self.store.retagged(tag);
        out
    }

    /// Token embedding table (`|V|×d`), shared with the output projection.
    pub fn token_embeddings(&self) -> &Tensor<T> {
        self.store.get(self.wte)
    }

    /// Overwrites parameters by name, e.g. from converted pretrained weights.
    pub fn import<'t>(&mut self, tensors: impl IntoIterator<Item = (&'t str, &'t Tensor<T>)>) -> Result<()> {
        for (name, t) in tensors {
            self.store
                .load_values(name, t.shape(), t.values().to_vec())?;
        }
        Ok(())
    }

    fn signature(&self) -> u64 {
        let c = &self.cfg;
        let words = [
            self.store.tag() as u64,
            c.layers as u64,
            c.d_model as u64,
            c.n_heads as u64,
            c.vocab_size as u64,
            c.max_context as u64,
        ];
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        xxh64(&bytes, 0)
    }

    fn check_prefix(&self, g: &Graph<'_, T>, prefix: &PrefixNodes) -> Result<usize> {
        if prefix.layers.len() != self.cfg.layers {
            return Err(Error::Shape {
                op: "prefix layers",
                left: vec![prefix.layers.len()],
                right: vec![self.cfg.layers],
            });
        }
        let theta = g.shape(prefix.layers[0].0)[0];
        for &(k, v) in &prefix.layers {
            for n in [k, v] {
                if g.shape(n) != [theta, self.cfg.d_model] {
                    return Err(Error::Shape {
                        op: "prefix block",
                        left: g.shape(n).to_vec(),
                        right: vec![theta, self.cfg.d_model],
                    });
                }
            }
        }
        Ok(theta)
    }

    /// Records a forward pass into `g`.
    ///
    /// Keys/values at layer ℓ are `[prefix_ℓ; projected inputs]`; a position may
    /// attend to every prefix slot, every virtual row and its causal past.
    /// Virtual rows get positional embeddings `0..ρ`, real tokens follow.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        tokens: &[u32],
        prefix: Option<&PrefixNodes>,
        virtual_prefix: Option<NodeId>,
    ) -> Result<ForwardNodes> {
        self.forward_graph_at(g, tokens, prefix, virtual_prefix, 0)
    }

    /// As [`Backbone::forward_graph`], with the real tokens' positions shifted
    /// by `offset` (positions `ρ+offset..`), so a context can be right-aligned
    /// to a fixed anchor.
    pub fn forward_graph_at<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        tokens: &[u32],
        prefix: Option<&PrefixNodes>,
        virtual_prefix: Option<NodeId>,
        offset: usize,
    ) -> Result<ForwardNodes> {
        if tokens.is_empty() {
            return Err(Error::Invalid("forward needs at least one token".into()));
        }
        let d = self.cfg.d_model;
        let rho = match virtual_prefix {
            Some(v) => {
                let shape = g.shape(v);
                if shape.len() != 2 || shape[1] != d {
                    return Err(Error::Shape {
                        op: "virtual prefix",
                        left: shape.to_vec(),
                        right: vec![0, d],
                    });
                }
                shape[0]
            }
            None => 0,
        };
        let needed = tokens.len() + rho + offset;
        if needed > self.cfg.max_context {
            return Err(Error::Budget {
                needed,
                budget: self.cfg.max_context,
            });
        }
        if let Some(p) = prefix {
            self.check_prefix(g, p)?;
        }

        let wte = g.param(&self.store, self.wte);
        let wpe = g.param(&self.store, self.wpe);
        let tok = g.gather(wte, tokens)?;
        let x = match virtual_prefix {
            Some(v) => g.concat_rows(&[v, tok])?,
            None => tok,
        };
        let positions: Vec<u32> = (0..rho as u32).chain((rho + offset) as u32..needed as u32).collect();
        let pos = g.gather(wpe, &positions)?;
        let mut x = g.add(x, pos)?;

        let mut layer_kv = Vec::with_capacity(self.cfg.layers);
        let mut score_shapes = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let past = prefix.map(|p| p.layers[l]);
            let (out, k, v, shape) = self.block(g, l, x, past)?;
            x = out;
            layer_kv.push((k, v));
            score_shapes.push(shape);
        }
        let gain = g.param(&self.store, self.lnf_g);
        let bias = g.param(&self.store, self.lnf_b);
        let xf = g.layer_norm(x, gain, bias)?;
        let hidden = g.rows(xf, rho, tokens.len())?;
        let logits = g.matmul_nt(hidden, wte)?;
        Ok(ForwardNodes {
            logits,
            hidden,
            layer_kv,
            score_shapes,
        })
    }

    /// One transformer block. `past` rows are prepended to the keys and values
    /// and are visible to every query.
    fn block<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        l: usize,
        x: NodeId,
        past: Option<(NodeId, NodeId)>,
    ) -> Result<(NodeId, NodeId, NodeId, (usize, usize))> {
        let ids = &self.layers[l];
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let s = &self.store;

        let (g1, b1) = (g.param(s, ids.ln1_g), g.param(s, ids.ln1_b));
        let h = g.layer_norm(x, g1, b1)?;
        let w = g.param(s, ids.w_qkv);
        let b = g.param(s, ids.b_qkv);
        let qkv = g.matmul(h, w)?;
        let qkv = g.add_row(qkv, b)?;
        let q = g.cols(qkv, 0, d)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = g.cols(qkv, d, d)?;
        let v = g.cols(qkv, 2 * d, d)?;
        let (k, v) = match past {
            Some((pk, pv)) => (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?),
            None => (k, v),
        };
        let shape = (g.shape(q)[0], g.shape(k)[0]);

        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for hd in 0..self.cfg.n_heads {
            let qh = g.cols(q, hd * dh, dh)?;
            let kh = g.cols(k, hd * dh, dh)?;
            let vh = g.cols(v, hd * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let probs = g.causal_softmax(scores)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let att = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let wo = g.param(s, ids.w_o);
        let bo = g.param(s, ids.b_o);
        let att = g.matmul(att, wo)?;
        let att = g.add_row(att, bo)?;
        let x = g.add(x, att)?;

        let (g2, b2) = (g.param(s, ids.ln2_g), g.param(s, ids.ln2_b));
        let h = g.layer_norm(x, g2, b2)?;
        let wf = g.param(s, ids.w_fc);
        let bf = g.param(s, ids.b_fc);
        let f = g.matmul(h, wf)?;
        let f = g.add_row(f, bf)?;
        let f = g.gelu(f);
        let wp = g.param(s, ids.w_proj);
        let bp = g.param(s, ids.b_proj);
        let f = g.matmul(f, wp)?;
        let f = g.add_row(f, bp)?;
        let x = g.add(x, f)?;
        Ok((x, k, v, shape))
    }

    /// Untracked forward pass returning concrete tensors.
    pub fn forward(
        &self,
        tokens: &[u32],
        prefix: Option<&PrefixCache<T>>,
        virtual_prefix: Option<&Tensor<T>>,
    ) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let prefix = prefix.map(|p| p.to_nodes(&mut g)).transpose()?;
        let virt = virtual_prefix
            .map(|v| g.constant_ref(v.shape().to_vec(), v.values()))
            .transpose()?;
        let out = self.forward_graph(&mut g, tokens, prefix.as_ref(), virt)?;
        Ok(ForwardOutput {
            logits: g.to_tensor(out.logits),
            last_hidden: g.to_tensor(out.hidden),
            score_shapes: out.score_shapes,
        })
    }

    /// Runs the full context once and returns the decode state plus the logits
    /// for the token following the context.
    pub fn start_decode(
        &self,
        tokens: &[u32],
        prefix: Option<&PrefixCache<T>>,
        virtual_prefix: Option<&Tensor<T>>,
    ) -> Result<(DecodeState<T>, Vec<T>)> {
        self.start_decode_at(tokens, prefix, virtual_prefix, 0)
    }

    /// As [`Backbone::start_decode`] with a position offset for the tokens.
    pub fn start_decode_at(
        &self,
        tokens: &[u32],
        prefix: Option<&PrefixCache<T>>,
        virtual_prefix: Option<&Tensor<T>>,
        offset: usize,
    ) -> Result<(DecodeState<T>, Vec<T>)> {
        let mut g = Graph::new();
        let prefix = prefix.map(|p| p.to_nodes(&mut g)).transpose()?;
        let virt = virtual_prefix
            .map(|v| g.constant_ref(v.shape().to_vec(), v.values()))
            .transpose()?;
        let rho = virtual_prefix.map_or(0, |v| v.rows());
        let out = self.forward_graph_at(&mut g, tokens, prefix.as_ref(), virt, offset)?;
        let v = self.cfg.vocab_size;
        let logits = g.value(out.logits);
        let last = logits[logits.len() - v..].to_vec();
        let keys = out.layer_kv.iter().map(|&(k, _)| g.value(k).to_vec()).collect();
        let values = out.layer_kv.iter().map(|&(_, v)| g.value(v).to_vec()).collect();
        let cached_rows = g.shape(out.layer_kv[0].0)[0];
        Ok((
            DecodeState {
                signature: self.signature(),
                keys,
                values,
                cached_rows,
                positions: rho + offset + tokens.len(),
            },
            last,
        ))
    }

    /// Feeds one more token and returns the logits for the position after it.
    pub fn generate_step(&self, state: &mut DecodeState<T>, token: u32) -> Result<Vec<T>> {
        if state.signature != self.signature() || state.keys.len() != self.cfg.layers {
            return Err(Error::StateMismatch(
                "state was produced by a different model".into(),
            ));
        }
        let d = self.cfg.d_model;
        if state.keys.iter().any(|k| k.len() != state.cached_rows * d) {
            return Err(Error::StateMismatch("cache length disagrees with row count".into()));
        }
        if state.positions + 1 > self.cfg.max_context {
            return Err(Error::Budget {
                needed: state.positions + 1,
                budget: self.cfg.max_context,
            });
        }
        let mut new_kv = Vec::with_capacity(self.cfg.layers);
        let logits = {
            let mut g = Graph::new();
            let wte = g.param(&self.store, self.wte);
            let wpe = g.param(&self.store, self.wpe);
            let tok = g.gather(wte, &[token])?;
            let pos = g.gather(wpe, &[state.positions as u32])?;
            let mut x = g.add(tok, pos)?;
            for l in 0..self.cfg.layers {
                let pk = g.constant_ref(vec![state.cached_rows, d], &state.keys[l])?;
                let pv = g.constant_ref(vec![state.cached_rows, d], &state.values[l])?;
                let (out, k, v, _) = self.block(&mut g, l, x, Some((pk, pv)))?;
                x = out;
                new_kv.push((k, v));
            }
            let gain = g.param(&self.store, self.lnf_g);
            let bias = g.param(&self.store, self.lnf_b);
            let xf = g.layer_norm(x, gain, bias)?;
            let logits = g.matmul_nt(xf, wte)?;
            let last_rows = |n: NodeId| g.value(n)[state.cached_rows * d..].to_vec();
            let appended: Vec<(Vec<T>, Vec<T>)> =
                new_kv.iter().map(|&(k, v)| (last_rows(k), last_rows(v))).collect();
            (g.value(logits).to_vec(), appended)
        };
        let (logits, appended) = logits;
        for (l, (k, v)) in appended.into_iter().enumerate() {
            state.keys[l].extend_from_slice(&k);
            state.values[l].extend_from_slice(&v);
        }
        state.cached_rows += 1;
        state.positions += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize) -> Backbone<f64> {
        let cfg = BackboneConfig {
            layers,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_context: 40,
            vocab_size: 12,
            init_std: 0.3,
        };
        Backbone::new(cfg, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn random_prefix(m: &Backbone<f64>, theta: usize, seed: u64) -> PrefixCache<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = m.config().d_model;
        PrefixCache {
            layers: (0..m.config().layers)
                .map(|_| {
                    (
                        Tensor::randn(vec![theta, d], 0.5, &mut rng),
                        Tensor::randn(vec![theta, d], 0.5, &mut rng),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig {
            vocab_size: 50,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_prefix_matches_plain_forward() {
        let m = tiny(2);
        let toks = [5, 6, 7, 8, 9];
        let plain = m.forward(&toks, None, None).unwrap();
        let empty = PrefixCache::empty(2, 16);
        let with = m.forward(&toks, Some(&empty), None).unwrap();
        for (a, b) in plain.logits.values().iter().zip(with.logits.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn key_length_includes_prefix() {
        let m = tiny(2);
        let p = random_prefix(&m, 16, 1);
        let toks: Vec<u32> = (0..10).map(|i| 5 + (i % 7)).collect();
        let out = m.forward(&toks, Some(&p), None).unwrap();
        assert!(out.score_shapes.iter().all(|&(_, k)| k == 26));
        assert_eq!(out.logits.shape(), &[10, 12]);
        assert_eq!(out.last_hidden.shape(), &[10, 16]);
    }

    #[test]
    fn score_shape_law_with_virtual_rows() {
        let m = tiny(2);
        let p = random_prefix(&m, 3, 2);
        let virt = Tensor::randn(vec![4, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let out = m.forward(&[5, 6, 7], Some(&p), Some(&virt)).unwrap();
        assert!(out.score_shapes.iter().all(|&s| s == (4 + 3, 3 + 4 + 3)));
        assert_eq!(out.logits.rows(), 3);
    }

    #[test]
    fn perturbing_a_token_leaves_earlier_logits() {
        let m = tiny(2);
        let p = random_prefix(&m, 2, 4);
        let mut toks: Vec<u32> = (0..12).map(|i| 5 + (i % 7)).collect();
        let a = m.forward(&toks, Some(&p), None).unwrap();
        toks[7] = if toks[7] == 5 { 6 } else { 5 };
        let b = m.forward(&toks, Some(&p), None).unwrap();
        let v = 12;
        for pos in 0..7 {
            for j in 0..v {
                assert_eq!(a.logits.values()[pos * v + j], b.logits.values()[pos * v + j]);
            }
        }
        assert_ne!(a.logits.row(7), b.logits.row(7));
    }

    #[test]
    fn budget_is_enforced() {
        let m = tiny(1);
        let toks = vec![5u32; 41];
        assert!(matches!(
            m.forward(&toks, None, None),
            Err(Error::Budget { needed: 41, budget: 40 })
        ));
        let virt = Tensor::zeros(vec![5, 16]);
        assert!(matches!(
            m.forward(&toks[..36], None, Some(&virt)),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn offset_decode_matches_offset_forward() {
        let m = tiny(2);
        let virt = Tensor::randn(vec![2, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(11));
        let ctx: Vec<u32> = (0..6).map(|i| 5 + (i * 2 % 7)).collect();
        let full = |seq: &[u32]| {
            let mut g = Graph::new();
            let v = g.constant_ref(vec![2, 16], virt.values()).unwrap();
            let out = m.forward_graph_at(&mut g, seq, None, Some(v), 9).unwrap();
            g.to_tensor(out.logits)
        };
        let (mut st, first) = m.start_decode_at(&ctx, None, Some(&virt), 9).unwrap();
        assert_eq!(st.positions(), 17);
        assert_eq!(first.as_slice(), full(&ctx).row(5));
        let unshifted = m.forward(&ctx, None, Some(&virt)).unwrap();
        assert_ne!(unshifted.logits.row(5), full(&ctx).row(5));
        let step = m.generate_step(&mut st, 7).unwrap();
        let mut seq = ctx.clone();
        seq.push(7);
        let max = step
            .iter()
            .zip(full(&seq).row(6))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-5, "{max}");
        assert!(m.start_decode_at(&ctx, None, Some(&virt), 33).is_err());
    }

    #[test]
    fn incremental_decode_matches_recompute() {
        let m = tiny(2);
        let p = random_prefix(&m, 3, 9);
        let virt = Tensor::randn(vec![2, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(10));
        let ctx: Vec<u32> = (0..20).map(|i| 5 + (i * 3 % 7)).collect();
        let (mut st, first) = m.start_decode(&ctx, Some(&p), Some(&virt)).unwrap();
        let full = m.forward(&ctx, Some(&p), Some(&virt)).unwrap();
        assert_eq!(first.as_slice(), full.logits.row(19));

        let mut seq = ctx.clone();
        for &t in &[6u32, 9, 3] {
            let inc = m.generate_step(&mut st, t).unwrap();
            seq.push(t);
            let full = m.forward(&seq, Some(&p), Some(&virt)).unwrap();
            let last = full.logits.row(seq.len() - 1);
            let max = inc
                .iter()
                .zip(last)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max <= 1e-5, "max |Δ| = {max}");
        }
    }

    #[test]
    fn decode_state_checks() {
        let m = tiny(1);
        let (mut st, _) = m.start_decode(&[5; 39], None, None).unwrap();
        m.generate_step(&mut st, 6).unwrap();
        assert!(matches!(m.generate_step(&mut st, 6), Err(Error::Budget { .. })));

        let other = tiny(2);
        let (mut st, _) = other.start_decode(&[5, 6], None, None).unwrap();
        assert!(matches!(
            m.generate_step(&mut st, 6),
            Err(Error::StateMismatch(_))
        ));
    }
}
