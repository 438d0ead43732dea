//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in creation order. Nodes are immutable
//! once created, so replaying the tape in reverse visits each node after all of
//! its consumers and every use contributes exactly one gradient term.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, gemm};
use super::{ParamId, ParamKey, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamKey),
    MatMul {
        a: NodeId,
        b: NodeId,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Scale(NodeId, T),
    Tanh(NodeId),
    Gelu {
        x: NodeId,
        /// Inner tanh per element, kept only when tracked.
        tanh: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: Vec<T>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    CausalSoftmax(NodeId),
    Rows {
        x: NodeId,
        start: usize,
    },
    Cols {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        ignore: u32,
        probs: Vec<T>,
        count: usize,
    },
    MeanRows(NodeId),
    Sum(NodeId),
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by one backward pass: per parameter and per tracked
/// non-parameter leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamKey, Vec<T>>,
    leaves: BTreeMap<NodeId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Vec<T>)> {
        self.params.iter()
    }

    pub fn param(&self, key: ParamKey) -> Option<&[T]> {
        self.params.get(&key).map(Vec::as_slice)
    }

    pub fn leaf(&self, id: NodeId) -> Option<&[T]> {
        self.leaves.get(&id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }

    /// Elementwise sum of parameter gradients; leaf gradients are graph-local
    /// and are dropped.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (k, g) in other.params {
            match self.params.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => {
                    self.params.insert(k, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// The computation record: an append-only tape of nodes borrowing parameter
/// storage for the lifetime `'a`.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    param_nodes: HashMap<ParamKey, NodeId>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, tracked: bool) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape invariant")
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id)[0]
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    fn tr(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].tracked)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Untracked constant owned by the graph.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<NodeId> {
        let t = Tensor::new(shape, values)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Cow::Owned(t.into_values()), shape, Op::Leaf, false))
    }

    /// Untracked constant borrowing external storage.
    pub fn constant_ref(&mut self, shape: Vec<usize>, values: &'a [T]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape {
                op: "constant",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(self.push(Cow::Borrowed(values), shape, Op::Leaf, false))
    }

    /// Leaf mirroring a tensor; tracked when the tensor requires grad.
    pub fn tensor(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.push(
            Cow::Borrowed(t.values()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Leaf for a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> NodeId {
        let key = store.key(id);
        if let Some(&n) = self.param_nodes.get(&key) {
            return n;
        }
        let t = store.get(id);
        let n = self.push(
            Cow::Borrowed(t.values()),
            t.shape().to_vec(),
            Op::Param(key),
            t.requires_grad,
        );
        self.param_nodes.insert(key, n);
        n
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, a_t: bool, b_t: bool) -> Result<NodeId> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), a_t, self.value(b), b_t, T::zero(), &mut out);
        let tracked = self.tr(&[a, b]);
        Ok(self.push(
            Cow::Owned(out),
            vec![m, n],
            Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tr(&[a, b]);
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tr(&[a, b]);
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b), tracked))
    }

    /// Adds a bias vector (1×c or c) to every row of `x` (r×c).
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims2(x, "add_row")?;
        if self.value(bias).len() != c {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        // max(1) keeps zero-width rows (e.g. an empty virtual block) legal
        for row in out.chunks_exact_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, &v)| *o += v);
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tr(&[x, bias]);
        Ok(self.push(Cow::Owned(out), shape, Op::AddRow { x, bias }, tracked))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let s = T::from_f64(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tr(&[x]);
        self.push(Cow::Owned(out), shape, Op::Scale(x, s), tracked)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tr(&[x]);
        self.push(Cow::Owned(out), shape, Op::Tanh(x), tracked)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tracked = self.tr(&[x]);
        let (out, tanh) = if tracked {
            self.value(x).iter().map(|&v| kernels::gelu_with_tanh(v)).unzip()
        } else {
            (self.value(x).iter().map(|&v| kernels::gelu(v)).collect(), Vec::new())
        };
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu { x, tanh }, tracked)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        let stats =
            kernels::layer_norm_rows(self.value(x), c, self.value(gain), self.value(bias), &mut out);
        let shape = self.shape(x).to_vec();
        let tracked = self.tr(&[x, gain, bias]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            tracked,
        ))
    }

    // ── normalizers ─────────────────────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).to_vec();
        let mut line = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    line[j] = out[base + j * inner];
                }
                kernels::softmax_in_place(&mut line);
                for j in 0..len {
                    out[base + j * inner] = line[j];
                }
            }
        }
        let tracked = self.tr(&[x]);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x, axis }, tracked))
    }

    /// Row softmax of a q×k score matrix where query row `i` may only see key
    /// columns `j <= i + (k - q)`. Leading key columns beyond the query count
    /// (prefix slots, cached past) are visible to every query. Masked entries
    /// are exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (q, k) = self.dims2(x, "causal_softmax")?;
        if k < q {
            return Err(Error::Shape {
                op: "causal_softmax",
                left: vec![q, k],
                right: vec![q, q],
            });
        }
        let offset = k - q;
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_exact_mut(k).enumerate() {
            let visible = offset + i + 1;
            kernels::softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = T::zero());
        }
        let tracked = self.tr(&[x]);
        Ok(self.push(Cow::Owned(out), vec![q, k], Op::CausalSoftmax(x), tracked))
    }

    // ── structural ──────────────────────────────────────────────────────

    pub fn rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "rows")?;
        if start + len > r {
            return Err(Error::Index {
                what: "row slice",
                index: start + len,
                bound: r,
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let tracked = self.tr(&[x]);
        Ok(self.push(Cow::Owned(out), vec![len, c], Op::Rows { x, start }, tracked))
    }

    pub fn cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "cols")?;
        if start + len > c {
            return Err(Error::Index {
                what: "column slice",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.value(x).chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let tracked = self.tr(&[x]);
        Ok(self.push(Cow::Owned(out), vec![r, len], Op::Cols { x, start }, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let c = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let tracked = self.tr(parts);
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, c],
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.tr(parts);
        Ok(self.push(
            Cow::Owned(out),
            vec![r, c],
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.value(x).to_vec();
        let tracked = self.tr(&[x]);
        Ok(self.push(Cow::Owned(out), shape, Op::Reshape(x), tracked))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (r, c) = self.dims2(table, "gather")?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            let id = id as usize;
            if id >= r {
                return Err(Error::Index {
                    what: "gather",
                    index: id,
                    bound: r,
                });
            }
            out.extend_from_slice(&self.value(table)[id * c..(id + 1) * c]);
        }
        let tracked = self.tr(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), c],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Mean next-token negative log-likelihood over rows whose target is not
    /// `ignore`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], ignore: u32) -> Result<NodeId> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0f64;
        let mut count = 0usize;
        for (row, &target) in probs.chunks_exact_mut(v).zip(targets) {
            if target == ignore {
                continue;
            }
            if target as usize >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: target as usize,
                    bound: v,
                });
            }
            loss -= kernels::log_softmax(row)[target as usize];
            kernels::softmax_in_place(row);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = T::from_f64(loss / count as f64);
        let tracked = self.tr(&[logits]);
        Ok(self.push(
            Cow::Owned(vec![value]),
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            tracked,
        ))
    }

    /// Column-wise mean over rows: r×c → 1×c.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        if r == 0 {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let mut out = vec![T::zero(); c];
        for row in self.value(x).chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = T::one() / T::from_f64(r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let tracked = self.tr(&[x]);
        Ok(self.push(Cow::Owned(out), vec![1, c], Op::MeanRows(x), tracked))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().copied().sum::<T>();
        let tracked = self.tr(&[x]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), tracked)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Replays the tape from a scalar `loss` and returns the gradient of every
    /// tracked parameter and leaf reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        };
        if !self.nodes[loss.0].tracked {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(NodeId(idx), dy);
                }
                Op::Param(key) => {
                    out.params.insert(*key, dy);
                }
                Op::MatMul {
                    a,
                    b,
                    a_t,
                    b_t,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.nodes[a.0].tracked {
                        let av = self.value(*b);
                        let ga = self.grad_buf(&mut grads, *a);
                        if !*a_t {
                            // dA = dC · op(B)ᵀ
                            gemm(m, n, k, &dy, false, av, !*b_t, T::one(), ga);
                        } else {
                            // dA(stored k×m) = op(B) · dCᵀ
                            gemm(k, n, m, av, *b_t, &dy, true, T::one(), ga);
                        }
                    }
                    if self.nodes[b.0].tracked {
                        let aval = self.value(*a);
                        let gb = self.grad_buf(&mut grads, *b);
                        if !*b_t {
                            // dB = op(A)ᵀ · dC
                            gemm(k, m, n, aval, !*a_t, &dy, false, T::one(), gb);
                        } else {
                            // dB(stored n×k) = dCᵀ · op(A)
                            gemm(n, m, k, &dy, true, aval, *a_t, T::one(), gb);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.nodes[x.0].tracked {
                            add_into(self.grad_buf(&mut grads, x), &dy);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].tracked {
                        let bv = self.value(*b);
                        let ga = self.grad_buf(&mut grads, *a);
                        for ((g, &d), &v) in ga.iter_mut().zip(&dy).zip(bv) {
                            *g += d * v;
                        }
                    }
                    if self.nodes[b.0].tracked {
                        let av = self.value(*a);
                        let gb = self.grad_buf(&mut grads, *b);
                        for ((g, &d), &v) in gb.iter_mut().zip(&dy).zip(av) {
                            *g += d * v;
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    if self.nodes[x.0].tracked {
                        add_into(self.grad_buf(&mut grads, *x), &dy);
                    }
                    if self.nodes[bias.0].tracked {
                        let gb = self.grad_buf(&mut grads, *bias);
                        let c = gb.len().max(1);
                        for row in dy.chunks_exact(c) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    let gx = self.grad_buf(&mut grads, *x);
                    gx.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d * s);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = self.grad_buf(&mut grads, *x);
                    for ((g, &d), &yv) in gx.iter_mut().zip(&dy).zip(y.iter()) {
                        *g += d * (T::one() - yv * yv);
                    }
                }
                Op::Gelu { x, tanh } => {
                    let xv = self.value(*x);
                    let gx = self.grad_buf(&mut grads, *x);
                    for (((g, &d), &v), &t) in gx.iter_mut().zip(&dy).zip(xv).zip(tanh) {
                        *g += d * kernels::gelu_grad_from_tanh(v, t);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let c = *node.shape.last().expect("rank 2");
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let xhat: Vec<T> = xv
                        .chunks_exact(c)
                        .zip(stats.chunks_exact(2))
                        .flat_map(|(row, st)| row.iter().map(move |&v| (v - st[0]) * st[1]))
                        .collect();
                    if self.nodes[gain.0].tracked {
                        let gg = self.grad_buf(&mut grads, *gain);
                        for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                gg[j] += drow[j] * hrow[j];
                            }
                        }
                    }
                    if self.nodes[bias.0].tracked {
                        let gb = self.grad_buf(&mut grads, *bias);
                        for drow in dy.chunks_exact(c) {
                            add_into(gb, drow);
                        }
                    }
                    if self.nodes[x.0].tracked {
                        let nf = T::from_f64(c as f64);
                        let gx = self.grad_buf(&mut grads, *x);
                        for (r, (drow, hrow)) in
                            dy.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate()
                        {
                            let rstd = stats[2 * r + 1];
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for j in 0..c {
                                let dh = drow[j] * gv[j];
                                mean_d += dh;
                                mean_dh += dh * hrow[j];
                            }
                            mean_d /= nf;
                            mean_dh /= nf;
                            let grow = &mut gx[r * c..(r + 1) * c];
                            for j in 0..c {
                                let dh = drow[j] * gv[j];
                                grow[j] += rstd * (dh - mean_d - hrow[j] * mean_dh);
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let y = &node.value;
                    let gx = self.grad_buf(&mut grads, *x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot = (0..len)
                                .map(|j| dy[base + j * inner] * y[base + j * inner])
                                .sum::<T>();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (dy[p] - dot);
                            }
                        }
                    }
                }
                Op::CausalSoftmax(x) => {
                    let k = node.shape[1];
                    let y = &node.value;
                    let gx = self.grad_buf(&mut grads, *x);
                    for ((yrow, drow), grow) in y
                        .chunks_exact(k)
                        .zip(dy.chunks_exact(k))
                        .zip(gx.chunks_exact_mut(k))
                    {
                        let dot = yrow.iter().zip(drow).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..k {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                }
                Op::Rows { x, start } => {
                    let c = node.shape[1];
                    let gx = self.grad_buf(&mut grads, *x);
                    add_into(&mut gx[start * c..start * c + dy.len()], &dy);
                }
                Op::Cols { x, start } => {
                    let len = node.shape[1];
                    let c = self.shape(*x)[1];
                    let gx = self.grad_buf(&mut grads, *x);
                    for (grow, drow) in gx.chunks_exact_mut(c).zip(dy.chunks_exact(len)) {
                        add_into(&mut grow[*start..start + len], drow);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.nodes[p.0].tracked {
                            add_into(self.grad_buf(&mut grads, p), &dy[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let c = node.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.nodes[p.0].tracked {
                            let gp = self.grad_buf(&mut grads, p);
                            for (grow, drow) in gp.chunks_exact_mut(w).zip(dy.chunks_exact(c)) {
                                add_into(grow, &drow[off..off + w]);
                            }
                        }
                        off += w;
                    }
                }
                Op::Reshape(x) => {
                    add_into(self.grad_buf(&mut grads, *x), &dy);
                }
                Op::Gather { table, ids } => {
                    let c = node.shape[1];
                    let gt = self.grad_buf(&mut grads, *table);
                    for (&id, drow) in ids.iter().zip(dy.chunks_exact(c)) {
                        let id = id as usize;
                        add_into(&mut gt[id * c..(id + 1) * c], drow);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    let v = self.shape(*logits)[1];
                    let scale = dy[0] / T::from_f64(*count as f64);
                    let gl = self.grad_buf(&mut grads, *logits);
                    for ((grow, prow), &t) in gl
                        .chunks_exact_mut(v)
                        .zip(probs.chunks_exact(v))
                        .zip(targets)
                    {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            grow[j] += prow[j] * scale;
                        }
                        grow[t as usize] -= scale;
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let inv = T::one() / T::from_f64(r as f64);
                    let gx = self.grad_buf(&mut grads, *x);
                    for grow in gx.chunks_exact_mut(c) {
                        grow.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d * inv);
                    }
                }
                Op::Sum(x) => {
                    let d = dy[0];
                    self.grad_buf(&mut grads, *x).iter_mut().for_each(|g| *g += d);
                }
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> &'g mut Vec<T> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(g: &mut Graph<'_, f64>, rows: &[&[f64]]) -> NodeId {
        let c = rows[0].len();
        g.constant(vec![rows.len(), c], rows.concat()).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_sums() {
        let mut g = Graph::<f64>::new();
        let i2 = mat(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = mat(&mut g, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = mat(&mut g, &[&[1.0], &[1.0]]);
        let p = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let s = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(s), &[3.0, 7.0]);
        assert_eq!(g.shape(s), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.25; 4]);
        let x = g.constant(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y)[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y)[1] - 0.75).abs() < 1e-12);
        assert!(matches!(g.softmax(x, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_random_vectors_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        for _ in 0..1000 {
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let x = g.constant(vec![5], v).unwrap();
            let y = g.softmax(x, 0).unwrap();
            let s: f64 = g.value(y).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(g.value(y).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(vec![2, 2, 2], (0..8).map(|v| v as f64).collect())
            .unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        // lines along axis 1 pair offsets (0,2), (1,3), (4,6), (5,7)
        for (a, b) in [(0, 2), (1, 3), (4, 6), (5, 7)] {
            assert!((v[a] + v[b] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let l = g.cross_entropy(x, &[2], u32::MAX).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let x = g.constant(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let l = g.cross_entropy(x, &[0], u32::MAX).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((g.scalar(l) - expected).abs() < 1e-12 * expected);
        assert!((g.scalar(l) - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_ignores_positions() {
        let rows = [[1.0, 2.0, 0.5], [0.0, 0.0, 3.0], [2.0, -1.0, 0.0]];
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![3, 3], rows.concat()).unwrap();
        let l = g.cross_entropy(x, &[1, 9, 0], 9).unwrap();
        // hand-computed per-position NLL: lse(row) - row[target]
        let nll = |r: &[f64; 3], t: usize| r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[t];
        let expected = 0.5 * (nll(&rows[0], 1) + nll(&rows[2], 0));
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(g.cross_entropy(x, &[7, 7], 7), Err(Error::EmptyLoss)));
        assert!(matches!(
            g.cross_entropy(x, &[0, 3], 7),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::new(vec![1], vec![3.0f64]).unwrap().tracked();
        let mut g = Graph::new();
        let xn = g.tensor(&x);
        let y = g.mul(xn, xn).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.leaf(xn).unwrap(), &[6.0]);
    }

    #[test]
    fn untracked_loss_has_no_gradients() {
        let mut store = ParamStore::<f64>::new(3);
        let id = store.add("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let c = g.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let y = g.matmul(w, c).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.is_empty());
        drop(g);
        store.accumulate(&grads);
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2, 4], vec![1.0; 8]).unwrap();
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y);
        // offset 2: row 0 sees 3 keys, row 1 sees all 4
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(v[3], 0.0);
        assert!((v[4] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let mut m = || {
                let v = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                v
            };
            let (va, vb, vc) = (m(), m(), m());
            let a = g.constant(vec![4, 4], va).unwrap();
            let b = g.constant(vec![4, 4], vb).unwrap();
            let c = g.constant(vec![4, 4], vc).unwrap();
            let ab = g.matmul(a, b).unwrap();
            let ab_c = g.matmul(ab, c).unwrap();
            let bc = g.matmul(b, c).unwrap();
            let a_bc = g.matmul(a, bc).unwrap();
            for (x, y) in g.value(ab_c).iter().zip(g.value(a_bc)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
