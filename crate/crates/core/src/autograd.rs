//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the record in reverse and
//! produces exact analytic gradients for every parameter in the
//! [`ParamStore`] the graph reads from.
//!
//! The op set is deliberately small and shaped around what the encoder
//! and the attention stages need: dense products, row-broadcast biases,
//! layer norm, segment-local self-attention over packed token rows,
//! single-key multi-head attention scores, and a mean cross-entropy head.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Re-registering a name replaces its value and keeps the id.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return ParamId(i);
        }
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(i)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }
}

/// Gradients aligned one-to-one with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_assign(s);
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A contiguous run of packed rows belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Input,
    Param(ParamId),
    Embed {
        param: ParamId,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SegAttention {
        q: Var,
        k: Var,
        v: Var,
        segs: Vec<Segment>,
        heads: usize,
        scale: f64,
        // per segment, per head: len×len row-softmax
        probs: Vec<Vec<Vec<f64>>>,
    },
    SegMean {
        x: Var,
        segs: Vec<Segment>,
    },
    Rows {
        x: Var,
        idx: Vec<usize>,
    },
    Stack(Vec<Var>),
    Concat(Var, Var),
    HeadScores {
        qp: Var,
        kp: Var,
        heads: usize,
        scale: f64,
    },
    HeadMix {
        w: Var,
        vp: Var,
        heads: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
    },
    ColMean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Softmax over the `true` entries of `mask`; masked entries get exactly 0.
///
/// Returns `None` when every entry is masked.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Option<Vec<f64>> {
    debug_assert_eq!(scores.len(), mask.len());
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for w in &mut out {
        *w /= z;
    }
    Some(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// Row lookup into a parameter table.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Embed {
                param: table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `x + 1·b` where `b` is a single row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1);
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(r, j, h);
                out.set(r, j, h * g[j] + b[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head self-attention restricted to each segment of packed rows.
    ///
    /// `q`, `k`, `v` are `N×h` projections; head `i` uses columns
    /// `i·h/heads .. (i+1)·h/heads`. Output is the head-concatenated `N×h`.
    pub fn seg_attention(&mut self, q: Var, k: Var, v: Var, segs: &[Segment], heads: usize, scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, h) = qv.shape();
        assert!(heads > 0 && h % heads == 0);
        let dh = h / heads;
        let mut out = Tensor::zeros(n, h);
        let mut probs = Vec::with_capacity(segs.len());
        for seg in segs {
            let mut seg_probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let c0 = hd * dh;
                let mut p = vec![0.0; seg.len * seg.len];
                for i in 0..seg.len {
                    let qi = &qv.row(seg.start + i)[c0..c0 + dh];
                    let row = &mut p[i * seg.len..(i + 1) * seg.len];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &kv.row(seg.start + j)[c0..c0 + dh];
                        *slot = crate::tensor::dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    let orow = &mut out.row_mut(seg.start + i)[c0..c0 + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vv.row(seg.start + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        self.push(
            out,
            Op::SegAttention {
                q,
                k,
                v,
                segs: segs.to_vec(),
                heads,
                scale,
                probs,
            },
        )
    }

    /// Mean of each segment's rows; an empty segment yields a zero row.
    pub fn seg_mean(&mut self, x: Var, segs: &[Segment]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Tensor::zeros(segs.len(), c);
        for (s, seg) in segs.iter().enumerate() {
            if seg.len == 0 {
                continue;
            }
            let inv = 1.0 / seg.len as f64;
            let orow = out.row_mut(s);
            for r in seg.start..seg.start + seg.len {
                for (o, v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        self.push(out, Op::SegMean { x, segs: segs.to_vec() })
    }

    /// Selects rows by index (repeats allowed).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::Rows { x, idx: idx.to_vec() })
    }

    /// Vertical concatenation.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data).expect("stack shape");
        self.push(out, Op::Stack(parts.to_vec()))
    }

    /// Horizontal concatenation `[a ; b]` per row.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Tensor::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            out.row_mut(r)[..ca].copy_from_slice(av.row(r));
            out.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::Concat(a, b))
    }

    /// Per-head attention distribution of a single key over `n` query rows.
    ///
    /// `qp: n×h`, `kp: 1×h`. Output `n×heads`, column `i` is a masked
    /// softmax of `qp[g, head i] · kp[head i] · scale` over `g`.
    pub fn head_scores(&mut self, qp: Var, kp: Var, mask: &[bool], heads: usize, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(qp), self.value(kp));
        let (n, h) = qv.shape();
        if mask.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: mask.len(),
            });
        }
        assert!(heads > 0 && h % heads == 0 && kv.shape() == (1, h));
        let dh = h / heads;
        let mut out = Tensor::zeros(n, heads);
        for hd in 0..heads {
            let c0 = hd * dh;
            let kk = &kv.data()[c0..c0 + dh];
            let scores: Vec<f64> = (0..n)
                .map(|g| crate::tensor::dot(&qv.row(g)[c0..c0 + dh], kk) * scale)
                .collect();
            let w = masked_softmax(&scores, mask)
                .ok_or_else(|| Error::Validation("attention mask has no true slot".into()))?;
            for (g, wg) in w.into_iter().enumerate() {
                out.set(g, hd, wg);
            }
        }
        Ok(self.push(out, Op::HeadScores { qp, kp, heads, scale }))
    }

    /// `out[d] = Σ_g w[g, head(d)] · vp[g, d]`, a `1×h` row.
    pub fn head_mix(&mut self, w: Var, vp: Var) -> Var {
        let (wv, vv) = (self.value(w), self.value(vp));
        let heads = wv.cols();
        let (n, h) = vv.shape();
        assert_eq!(wv.rows(), n);
        let dh = h / heads;
        let mut out = Tensor::zeros(1, h);
        for g in 0..n {
            for d in 0..h {
                out.data_mut()[d] += wv.get(g, d / dh) * vv.get(g, d);
            }
        }
        self.push(out, Op::HeadMix { w, vp, heads })
    }

    /// Mean of the rows whose mask entry is true.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let k = mask.iter().filter(|&&m| m).count();
        if k == 0 {
            return Err(Error::Validation("masked mean over zero rows".into()));
        }
        let mut out = Tensor::zeros(1, xv.cols());
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v / k as f64;
            }
        }
        Ok(self.push(out, Op::MaskedMean { x, mask: mask.to_vec() }))
    }

    /// Mean over rows, `1×c`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows().max(1) as f64;
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v / n;
            }
        }
        self.push(out, Op::ColMean(x))
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len());
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            total += cross_entropy_row(row, y);
            softmax_in_place(probs.row_mut(r));
        }
        let out = Tensor::from_vec(1, 1, vec![total / labels.len().max(1) as f64]).unwrap();
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Exact gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Graph("backward called without a recorded forward".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Graph("backward requires a scalar loss".into()));
        }
        let mut grads = Grads::zeros_like(self.params);
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => grads.get_mut(*p).add_assign(&g),
                Op::Embed { param, ids } => {
                    let table = grads.get_mut(*param);
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, d) in table.row_mut(id).iter_mut().zip(g.row(r)) {
                            *t += d;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    // dA = G·Bᵀ
                    let ga = slot(&mut adj, *a, m, k);
                    gemm(m, n, k, MatRef::normal(&g), MatRef::transposed(bv), ga.data_mut(), 1.0);
                    // dB = Aᵀ·G
                    let gb = slot(&mut adj, *b, k, n);
                    gemm(k, m, n, MatRef::transposed(av), MatRef::normal(&g), gb.data_mut(), 1.0);
                }
                Op::AddRow(x, b) => {
                    let (n, c) = g.shape();
                    slot(&mut adj, *x, n, c).add_assign(&g);
                    let gb = slot(&mut adj, *b, 1, c);
                    for r in 0..n {
                        for (o, d) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (n, c) = g.shape();
                    slot(&mut adj, *a, n, c).add_assign(&g);
                    slot(&mut adj, *b, n, c).add_assign(&g);
                }
                Op::Scale(x, s) => {
                    let (n, c) = g.shape();
                    let gx = slot(&mut adj, *x, n, c);
                    for (o, d) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += s * d;
                    }
                }
                Op::Relu(x) => {
                    let (n, c) = g.shape();
                    let xv = &self.nodes[x.0].value;
                    let gx = slot(&mut adj, *x, n, c);
                    for ((o, d), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *xi > 0.0 {
                            *o += d;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (n, c) = g.shape();
                    let gv = self.value(*gain).data().to_vec();
                    {
                        let gg = slot(&mut adj, *gain, 1, c);
                        for r in 0..n {
                            for j in 0..c {
                                gg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                            }
                        }
                    }
                    {
                        let gbias = slot(&mut adj, *bias, 1, c);
                        for r in 0..n {
                            for (o, d) in gbias.data_mut().iter_mut().zip(g.row(r)) {
                                *o += d;
                            }
                        }
                    }
                    let gx = slot(&mut adj, *x, n, c);
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..c).map(|j| g.get(r, j) * gv[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let row = gx.row_mut(r);
                        for j in 0..c {
                            row[j] += inv_std[r] * (dxhat[j] - m1 - xhat.get(r, j) * m2);
                        }
                    }
                }
                Op::SegAttention {
                    q,
                    k,
                    v,
                    segs,
                    heads,
                    scale,
                    probs,
                } => {
                    let (n, h) = g.shape();
                    let dh = h / heads;
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = Tensor::zeros(n, h);
                    let mut dk = Tensor::zeros(n, h);
                    let mut dv = Tensor::zeros(n, h);
                    for (seg, seg_probs) in segs.iter().zip(probs) {
                        let len = seg.len;
                        for (hd, p) in seg_probs.iter().enumerate() {
                            let c0 = hd * dh;
                            for i in 0..len {
                                let gi = &g.row(seg.start + i)[c0..c0 + dh];
                                let prow = &p[i * len..(i + 1) * len];
                                // dP_ij = gO_i · V_j
                                let dp: Vec<f64> = (0..len)
                                    .map(|j| crate::tensor::dot(gi, &vv.row(seg.start + j)[c0..c0 + dh]))
                                    .collect();
                                let inner: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                for j in 0..len {
                                    let pij = prow[j];
                                    let ds = pij * (dp[j] - inner) * scale;
                                    for d in 0..dh {
                                        dv.row_mut(seg.start + j)[c0 + d] += pij * gi[d];
                                        dq.row_mut(seg.start + i)[c0 + d] += ds * kv.row(seg.start + j)[c0 + d];
                                        dk.row_mut(seg.start + j)[c0 + d] += ds * qv.row(seg.start + i)[c0 + d];
                                    }
                                }
                            }
                        }
                    }
                    slot(&mut adj, *q, n, h).add_assign(&dq);
                    slot(&mut adj, *k, n, h).add_assign(&dk);
                    slot(&mut adj, *v, n, h).add_assign(&dv);
                }
                Op::SegMean { x, segs } => {
                    let (n, c) = self.value(*x).shape();
                    let gx = slot(&mut adj, *x, n, c);
                    for (s, seg) in segs.iter().enumerate() {
                        if seg.len == 0 {
                            continue;
                        }
                        let inv = 1.0 / seg.len as f64;
                        for r in seg.start..seg.start + seg.len {
                            for (o, d) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += d * inv;
                            }
                        }
                    }
                }
                Op::Rows { x, idx } => {
                    let (n, c) = self.value(*x).shape();
                    let gx = slot(&mut adj, *x, n, c);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, d) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::Stack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (n, c) = self.value(p).shape();
                        let gp = slot(&mut adj, p, n, c);
                        for r in 0..n {
                            for (o, d) in gp.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                                *o += d;
                            }
                        }
                        offset += n;
                    }
                }
                Op::Concat(a, b) => {
                    let (n, ca) = self.value(*a).shape();
                    let cb = self.value(*b).cols();
                    {
                        let ga = slot(&mut adj, *a, n, ca);
                        for r in 0..n {
                            for (o, d) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                                *o += d;
                            }
                        }
                    }
                    let gb = slot(&mut adj, *b, n, cb);
                    for r in 0..n {
                        for (o, d) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                            *o += d;
                        }
                    }
                }
                Op::HeadScores { qp, kp, heads, scale } => {
                    let w = &node.value;
                    let (qv, kv) = (self.value(*qp), self.value(*kp));
                    let (n, h) = qv.shape();
                    let dh = h / heads;
                    let mut dq = Tensor::zeros(n, h);
                    let mut dk = Tensor::zeros(1, h);
                    for hd in 0..*heads {
                        let c0 = hd * dh;
                        let inner: f64 = (0..n).map(|r| w.get(r, hd) * g.get(r, hd)).sum();
                        for r in 0..n {
                            let ds = w.get(r, hd) * (g.get(r, hd) - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for d in c0..c0 + dh {
                                dq.row_mut(r)[d] += ds * kv.data()[d];
                                dk.data_mut()[d] += ds * qv.get(r, d);
                            }
                        }
                    }
                    slot(&mut adj, *qp, n, h).add_assign(&dq);
                    slot(&mut adj, *kp, 1, h).add_assign(&dk);
                }
                Op::HeadMix { w, vp, heads } => {
                    let (wv, vv) = (self.value(*w), self.value(*vp));
                    let (n, h) = vv.shape();
                    let dh = h / heads;
                    let mut dw = Tensor::zeros(n, *heads);
                    let mut dvp = Tensor::zeros(n, h);
                    for r in 0..n {
                        for d in 0..h {
                            let gd = g.data()[d];
                            dw.row_mut(r)[d / dh] += gd * vv.get(r, d);
                            dvp.row_mut(r)[d] += wv.get(r, d / dh) * gd;
                        }
                    }
                    slot(&mut adj, *w, n, *heads).add_assign(&dw);
                    slot(&mut adj, *vp, n, h).add_assign(&dvp);
                }
                Op::MaskedMean { x, mask } => {
                    let (n, c) = self.value(*x).shape();
                    let k = mask.iter().filter(|&&m| m).count() as f64;
                    let gx = slot(&mut adj, *x, n, c);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (o, d) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *o += d / k;
                        }
                    }
                }
                Op::ColMean(x) => {
                    let (n, c) = self.value(*x).shape();
                    let inv = 1.0 / n.max(1) as f64;
                    let gx = slot(&mut adj, *x, n, c);
                    for r in 0..n {
                        for (o, d) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *o += d * inv;
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let (n, c) = probs.shape();
                    let s = g.data()[0] / n.max(1) as f64;
                    let gl = slot(&mut adj, *logits, n, c);
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            gl.row_mut(r)[j] += s * (probs.get(r, j) - t);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn slot(adj: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

/// Numerically careful `-log softmax(row)[label]`.
pub fn cross_entropy_row(row: &[f64], label: usize) -> f64 {
    let (imax, &max) = row.iter().enumerate().fold(
        (0, &f64::NEG_INFINITY),
        |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
    );
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imax)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (max - row[label]) + rest.ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_softmax_zeroes_masked_slots() {
        let w = masked_softmax(&[1.0, 50.0, 0.0], &[true, false, true]).unwrap();
        assert_eq!(w[1], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(masked_softmax(&[1.0], &[false]).is_none());
    }

    #[test]
    fn backward_requires_forward() {
        let params = ParamStore::new();
        let g = Graph::new(&params);
        assert!(matches!(g.backward(Var(0)), Err(Error::Graph(_))));
    }

    #[test]
    fn matmul_gradient_is_exact() {
        let mut params = ParamStore::new();
        let a = params.insert("a", Tensor::from_vec(1, 2, vec![2.0, 3.0]).unwrap());
        let mut g = Graph::new(&params);
        let av = g.param(a);
        let b = g.input(Tensor::from_vec(2, 1, vec![5.0, 7.0]).unwrap());
        let y = g.matmul(av, b);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).data(), &[5.0, 7.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert!((cross_entropy_row(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        let want = (-20.0f64).exp().ln_1p();
        let got = cross_entropy_row(&[10.0, -10.0], 0);
        assert!((got - want).abs() / want < 1e-12, "{got} vs {want}");
    }
}
