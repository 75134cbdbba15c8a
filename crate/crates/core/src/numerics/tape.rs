//! Tape-based reverse-mode differentiation over the closed op set the model uses.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, gemm, rotate_pairs};
use super::{Precision, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused causal attention node.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Multiplier applied to `q·k` (temperature over `√d_k`).
    pub logit_scale: f64,
    /// Per-head ALiBi slopes; the logit gains `-slope·(i-j)`.
    pub alibi_slopes: Option<Vec<f64>>,
}

impl AttnSpec {
    fn kv_head(&self, h: usize) -> usize {
        h / (self.heads / self.kv_heads)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, group: usize, inv: Vec<f64> },
    Rope { x: Var, head_dim: usize, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>> },
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64>, logits: Option<Vec<f64>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Silu(..) => "silu",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Rope { .. } => "rope",
            Op::Embed { .. } => "embed",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: BTreeMap<Var, String>,
    precision: Precision,
    checked: bool,
    record_logits: bool,
    scope: String,
    first_nonfinite: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    /// Check every produced value for NaN/Inf and remember the first offender.
    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    /// Keep pre-softmax attention logits for inspection.
    pub fn set_record_logits(&mut self, on: bool) {
        self.record_logits = on;
    }

    /// Label attached to non-finite reports, e.g. `"layer 2"`.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn first_nonfinite(&self) -> Option<&str> {
        self.first_nonfinite.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if self.precision == Precision::F32 && !matches!(op, Op::Leaf) {
            self.precision.round_slice(value.data_mut());
        }
        if self.checked && self.first_nonfinite.is_none() && !value.all_finite() {
            let loc = match &op {
                Op::Attention { .. } => self.attention_location(&value),
                _ => format!("{} ({})", self.scope, op.name()),
            };
            self.first_nonfinite = Some(loc);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn attention_location(&self, out: &Tensor) -> String {
        format!("{} attention output (shape {:?})", self.scope, out.shape())
    }

    /// Unnamed leaf (receives a gradient but is not reported by [`Grads::named`]).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Named parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.names.insert(v, name.to_string());
        v
    }

    /// `a·b`, or `a·bᵀ` when `b_t`.
    pub fn matmul(&mut self, a: Var, b: Var, b_t: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, kb) = if b_t {
            (bv.rows(), bv.cols())
        } else {
            (bv.cols(), bv.rows())
        };
        assert_eq!(k, kb, "matmul inner extents differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), b_t, &mut out, false);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, b_t })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add: shape mismatch");
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::silu);
        self.push(out, Op::Silu(a))
    }

    /// RMS normalization over contiguous groups of `group` columns with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, group: usize) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let cols = xv.cols();
        assert_eq!(gv.len(), cols, "rmsnorm gain length");
        assert_eq!(cols % group, 0, "rmsnorm group must divide columns");
        let mut out = vec![0.0; xv.len()];
        let mut inv = Vec::with_capacity(xv.len() / group);
        for (chunk, o) in xv.data().chunks(group).zip(out.chunks_mut(group)) {
            let r = kernels::inv_rms(chunk);
            inv.push(r);
            let g_off = (inv.len() - 1) * group % cols;
            for ((o, &c), &g) in o.iter_mut().zip(chunk).zip(&gv.data()[g_off..g_off + group]) {
                *o = c * r * g;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::RmsNorm { x, gain, group, inv })
    }

    /// Rotate adjacent pairs of every `head_dim` block of row `r` by `positions[r]·freqs`.
    pub fn rope(&mut self, x: Var, head_dim: usize, freqs: &[f64], positions: &[usize]) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert_eq!(positions.len(), rows, "one position per row");
        assert_eq!(freqs.len() * 2, head_dim, "head_dim must be twice the frequency count");
        assert_eq!(cols % head_dim, 0);
        let half = freqs.len();
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for &w in freqs {
                let a = p as f64 * w;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            for block in out[r * cols..(r + 1) * cols].chunks_mut(head_dim) {
                rotate_pairs(block, c, s, false);
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Rope { x, head_dim, cos: Arc::new(cos), sin: Arc::new(sin) },
        )
    }

    /// Gather rows of `table` by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "token id {id} out of vocabulary {vocab}");
            out.extend_from_slice(tv.row(id));
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embed { table, ids: ids.to_vec() },
        )
    }

    /// Mean token cross-entropy of `logits` (rows × vocab) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        assert_eq!(rows, targets.len(), "one target per row");
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = kernels::logsumexp(row);
            total += lse - row[t];
            for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (l - lse).exp();
            }
        }
        let loss = total / rows as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Fused causal attention; softmax row `i` is restricted to keys `j ≤ i`.
    ///
    /// `q` is `(batch·seq) × (heads·head_dim)`; `k`, `v` are `(batch·seq) × (kv_heads·head_dim)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q).clone(), self.value(k).clone(), self.value(v).clone());
        let (t, dk) = (spec.seq_len, spec.head_dim);
        assert_eq!(qv.rows(), spec.batch * t);
        assert_eq!(qv.cols(), spec.heads * dk);
        assert_eq!(kv.cols(), spec.kv_heads * dk);
        assert_eq!(vv.cols(), spec.kv_heads * dk);
        assert!(spec.kv_heads > 0 && spec.heads % spec.kv_heads == 0);
        let mut out = vec![0.0; qv.len()];
        let mut probs = vec![0.0; spec.batch * spec.heads * t * t];
        let mut logits_keep = self.record_logits.then(|| vec![0.0; probs.len()]);
        let mut qb = vec![0.0; t * dk];
        let mut kb = vec![0.0; t * dk];
        let mut vb = vec![0.0; t * dk];
        let mut zb = vec![0.0; t * dk];
        let mut nonfinite_at: Option<(usize, usize)> = None;
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let g = spec.kv_head(h);
                copy_block(qv.data(), qv.cols(), b * t, h * dk, t, dk, &mut qb);
                copy_block(kv.data(), kv.cols(), b * t, g * dk, t, dk, &mut kb);
                copy_block(vv.data(), vv.cols(), b * t, g * dk, t, dk, &mut vb);
                let p = &mut probs[(b * spec.heads + h) * t * t..(b * spec.heads + h + 1) * t * t];
                gemm(t, dk, t, &qb, false, &kb, true, p, false);
                let slope = spec.alibi_slopes.as_ref().map(|s| s[h]);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    for (j, s) in row[..=i].iter_mut().enumerate() {
                        *s *= spec.logit_scale;
                        if let Some(m) = slope {
                            *s -= m * (i - j) as f64;
                        }
                    }
                    if nonfinite_at.is_none() && row[..=i].iter().any(|x| !x.is_finite()) {
                        nonfinite_at = Some((b, h));
                    }
                    if let Some(keep) = logits_keep.as_mut() {
                        let base = (b * spec.heads + h) * t * t + i * t;
                        keep[base..base + i + 1].copy_from_slice(&row[..=i]);
                    }
                    let (live, masked) = row.split_at_mut(i + 1);
                    kernels::softmax_in_place(live);
                    masked.fill(0.0);
                }
                gemm(t, t, dk, p, false, &vb, false, &mut zb, false);
                write_block(&mut out, qv.cols(), b * t, h * dk, t, dk, &zb);
            }
        }
        if self.checked && self.first_nonfinite.is_none() {
            if let Some((b, h)) = nonfinite_at {
                self.first_nonfinite =
                    Some(format!("{} head {h} attention logits (sequence {b})", self.scope));
            }
        }
        let shape = qv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Attention { q, k, v, spec, probs, logits: logits_keep },
        )
    }

    /// Attention probabilities of node `v` (`batch·heads` blocks of `seq×seq`).
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs.as_slice())),
            _ => None,
        }
    }

    /// Pre-softmax logits of node `v`, when recorded.
    pub fn attention_logits(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { logits, .. } => logits.as_deref(),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut by_var = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_var.insert(
                    Var(idx),
                    Tensor::from_parts(node.value.shape().to_vec(), g),
                );
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                by_var.insert(Var(idx), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads {
            by_var,
            names: self.names.clone(),
        })
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                {
                    // dA = dC·Bᵀ (or dC·B when B was transposed)
                    let ga = acc(grads, *a, av.len());
                    gemm(m, n, k, g, false, bv.data(), !*b_t, ga, true);
                }
                let gb = acc(grads, *b, bv.len());
                if *b_t {
                    // B is n×k: dB = dCᵀ·A
                    gemm(n, m, k, g, true, av.data(), false, gb, true);
                } else {
                    // B is k×n: dB = Aᵀ·dC
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let ga = acc(grads, v, g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                {
                    let ga = acc(grads, *a, g.len());
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                let gb = acc(grads, *b, g.len());
                for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * w;
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y * s;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), &z) in ga.iter_mut().zip(g).zip(av) {
                    *x += y * kernels::silu_grad(z);
                }
            }
            Op::RmsNorm { x, gain, group, inv } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let cols = xv.cols();
                let mut dgain = vec![0.0; gv.len()];
                let mut dx = vec![0.0; xv.len()];
                let mut dxhat = vec![0.0; *group];
                for (ci, ((xc, gc), dxc)) in xv
                    .data()
                    .chunks(*group)
                    .zip(g.chunks(*group))
                    .zip(dx.chunks_mut(*group))
                    .enumerate()
                {
                    let r = inv[ci];
                    let g_off = ci * group % cols;
                    let mut dot = 0.0;
                    for c in 0..*group {
                        let xhat = xc[c] * r;
                        dgain[g_off + c] += gc[c] * xhat;
                        dxhat[c] = gc[c] * gv[g_off + c];
                        dot += dxhat[c] * xhat;
                    }
                    let mean = dot / *group as f64;
                    for c in 0..*group {
                        dxc[c] = r * (dxhat[c] - xc[c] * r * mean);
                    }
                }
                add_into(acc(grads, *x, dx.len()), &dx);
                add_into(acc(grads, *gain, dgain.len()), &dgain);
            }
            Op::Rope { x, head_dim, cos, sin } => {
                let cols = out.cols();
                let half = head_dim / 2;
                let mut d = g.to_vec();
                for r in 0..out.rows() {
                    let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
                    for block in d[r * cols..(r + 1) * cols].chunks_mut(*head_dim) {
                        rotate_pairs(block, c, s, true);
                    }
                }
                add_into(acc(grads, *x, d.len()), &d);
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let gt = acc(grads, *table, tv.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let gl = acc(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    for (x, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *x += scale * p;
                    }
                    row[t] -= scale;
                }
            }
            Op::Attention { q, k, v, spec, probs, .. } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, dk) = (spec.seq_len, spec.head_dim);
        let (qc, kc) = (qv.cols(), kv.cols());
        let mut dq = vec![0.0; qv.len()];
        let mut dkk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut qb = vec![0.0; t * dk];
        let mut kb = vec![0.0; t * dk];
        let mut vb = vec![0.0; t * dk];
        let mut gz = vec![0.0; t * dk];
        let mut dp = vec![0.0; t * t];
        let mut tmp = vec![0.0; t * dk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let gkv = spec.kv_head(h);
                copy_block(qv.data(), qc, b * t, h * dk, t, dk, &mut qb);
                copy_block(kv.data(), kc, b * t, gkv * dk, t, dk, &mut kb);
                copy_block(vv.data(), kc, b * t, gkv * dk, t, dk, &mut vb);
                copy_block(g, qc, b * t, h * dk, t, dk, &mut gz);
                let p = &probs[(b * spec.heads + h) * t * t..(b * spec.heads + h + 1) * t * t];
                // dV = Pᵀ·dZ
                gemm(t, t, dk, p, true, &gz, false, &mut tmp, false);
                add_block(&mut dv, kc, b * t, gkv * dk, t, dk, &tmp);
                // dP = dZ·Vᵀ, then softmax Jacobian on the causal prefix
                gemm(t, dk, t, &gz, false, &vb, true, &mut dp, false);
                for i in 0..t {
                    let pr = &p[i * t..i * t + i + 1];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pp) in dr[..=i].iter_mut().zip(pr) {
                        *d = spec.logit_scale * pp * (*d - inner);
                    }
                    dr[i + 1..].fill(0.0);
                }
                // dQ = dS·K, dK = dSᵀ·Q
                gemm(t, t, dk, &dp, false, &kb, false, &mut tmp, false);
                add_block(&mut dq, qc, b * t, h * dk, t, dk, &tmp);
                gemm(t, t, dk, &dp, true, &qb, false, &mut tmp, false);
                add_block(&mut dkk, kc, b * t, gkv * dk, t, dk, &tmp);
            }
        }
        add_into(acc(grads, q, dq.len()), &dq);
        add_into(acc(grads, k, dkk.len()), &dkk);
        add_into(acc(grads, v, dv.len()), &dv);
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn copy_block(src: &[f64], cols: usize, r0: usize, c0: usize, rows: usize, w: usize, dst: &mut [f64]) {
    for r in 0..rows {
        let s = (r0 + r) * cols + c0;
        dst[r * w..(r + 1) * w].copy_from_slice(&src[s..s + w]);
    }
}

fn write_block(dst: &mut [f64], cols: usize, r0: usize, c0: usize, rows: usize, w: usize, src: &[f64]) {
    for r in 0..rows {
        let d = (r0 + r) * cols + c0;
        dst[d..d + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
}

fn add_block(dst: &mut [f64], cols: usize, r0: usize, c0: usize, rows: usize, w: usize, src: &[f64]) {
    for r in 0..rows {
        let d = (r0 + r) * cols + c0;
        add_into(&mut dst[d..d + w], &src[r * w..(r + 1) * w]);
    }
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Grads {
    by_var: BTreeMap<Var, Tensor>,
    names: BTreeMap<Var, String>,
}

impl Grads {
    /// Gradient for leaf `v`; leaves that do not reach the loss hold exact zeros.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    /// Gradients of named parameter leaves. Repeated names are summed.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (v, name) in &self.names {
            let g = &self.by_var[v];
            match out.get_mut(name) {
                Some(existing) => add_into(existing.data_mut(), g.data()),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// Gradient map of `loss` over the leaves of `tape`.
pub fn grad(tape: &Tape, loss: Var) -> Result<Grads> {
    tape.backward(loss)
}
