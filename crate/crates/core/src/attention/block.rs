use serde::{Deserialize, Serialize};

use super::scheme::PositionalScheme;
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{gaussian_init, AttnSpec, RngStream, Tape, Tensor, Var};

/// Head geometry of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(heads: usize, kv_heads: usize, head_dim: usize) -> Result<Self> {
        let layout = Self { heads, kv_heads, head_dim };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(invalid("head counts and head_dim must be positive"));
        }
        if self.heads % self.kv_heads != 0 {
            return Err(invalid(format!(
                "{} key-value heads do not divide {} heads",
                self.kv_heads, self.heads
            )));
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Key-value head serving query head `h`.
    pub fn kv_head(&self, h: usize) -> usize {
        h / (self.heads / self.kv_heads)
    }
}

/// Tape handles of one attention layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub q_gain: Option<Var>,
    pub k_gain: Option<Var>,
}

/// Result of [`attention_block`]: the projected output and the attention node.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attn: Var,
}

/// Record causal multi-head attention over `batch` stacked sequences of length `seq`.
///
/// `x` is `(batch·seq) × d`. Projections are stored `out × in`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    vars: &AttnVars,
    layout: HeadLayout,
    scheme: &PositionalScheme,
    batch: usize,
    seq: usize,
) -> Result<BlockOutput> {
    scheme.validate(layout.heads, layout.head_dim)?;
    let rows = tape.value(x).rows();
    if rows != batch * seq {
        return Err(shape(format!("{rows} rows for {batch} sequences of length {seq}")));
    }
    let mut q = tape.matmul(x, vars.wq, true);
    let mut k = tape.matmul(x, vars.wk, true);
    let v = tape.matmul(x, vars.wv, true);
    if let Some(g) = vars.q_gain {
        q = tape.rmsnorm(q, g, layout.head_dim);
    }
    if let Some(g) = vars.k_gain {
        k = tape.rmsnorm(k, g, layout.head_dim);
    }
    if let Some(freqs) = scheme.effective_freqs() {
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        q = tape.rope(q, layout.head_dim, &freqs, &positions);
        k = tape.rope(k, layout.head_dim, &freqs, &positions);
    }
    let spec = AttnSpec {
        batch,
        seq_len: seq,
        heads: layout.heads,
        kv_heads: layout.kv_heads,
        head_dim: layout.head_dim,
        logit_scale: scheme.temperature / (layout.head_dim as f64).sqrt(),
        alibi_slopes: scheme.alibi_slopes().map(<[f64]>::to_vec),
    };
    let attn = tape.attention(q, k, v, spec);
    let out = tape.matmul(attn, vars.wo, true);
    Ok(BlockOutput { out, attn })
}

/// Attention weights and logits of one head over one sequence.
#[derive(Clone, Debug)]
pub struct HeadMap {
    /// Lower-triangular row-stochastic `T×T` matrix.
    pub weights: Tensor,
    /// Pre-softmax logits; entries above the diagonal are zero.
    pub logits: Tensor,
}

/// One layer of an [`AttentionTrace`].
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Residual stream entering the block.
    pub hidden: Tensor,
    /// Attention input (after the pre-attention normalization).
    pub normed: Tensor,
    pub heads: Vec<HeadMap>,
}

impl LayerTrace {
    /// Extract sequence `sequence` of a recorded attention node.
    pub fn from_tape(
        tape: &Tape,
        attn: Var,
        sequence: usize,
        hidden: Tensor,
        normed: Tensor,
    ) -> Result<Self> {
        let (spec, probs) = tape
            .attention_probs(attn)
            .ok_or_else(|| invalid("node is not an attention node"))?;
        let logits = tape
            .attention_logits(attn)
            .ok_or_else(|| invalid("attention logits were not recorded"))?;
        let t = spec.seq_len;
        let heads = (0..spec.heads)
            .map(|h| {
                let base = (sequence * spec.heads + h) * t * t;
                HeadMap {
                    weights: Tensor::matrix(t, t, probs[base..base + t * t].to_vec())
                        .expect("square block"),
                    logits: Tensor::matrix(t, t, logits[base..base + t * t].to_vec())
                        .expect("square block"),
                }
            })
            .collect();
        Ok(Self { hidden, normed, heads })
    }

    pub fn seq_len(&self) -> usize {
        self.hidden.rows()
    }
}

/// Per-layer, per-head attention maps captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, LayerTrace::seq_len)
    }

    pub fn weights(&self, layer: usize, head: usize) -> Result<&Tensor> {
        self.layers
            .get(layer)
            .and_then(|l| l.heads.get(head))
            .map(|m| &m.weights)
            .ok_or_else(|| invalid(format!("no head {head} in layer {layer}")))
    }

    /// Largest violation of row-stochasticity or causality across all maps.
    pub fn max_stochasticity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for layer in &self.layers {
            for head in &layer.heads {
                let t = head.weights.rows();
                for i in 0..t {
                    let row = head.weights.row(i);
                    let s: f64 = row[..=i].iter().sum();
                    worst = worst.max((s - 1.0).abs());
                    for &x in &row[i + 1..] {
                        worst = worst.max(x.abs());
                    }
                    for &x in &row[..=i] {
                        worst = worst.max(-x);
                    }
                }
            }
        }
        worst
    }
}

/// Tensor-level parameters of a single attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub layout: HeadLayout,
    /// `(heads·head_dim) × d`
    pub wq: Tensor,
    /// `(kv_heads·head_dim) × d`
    pub wk: Tensor,
    pub wv: Tensor,
    /// `d × (heads·head_dim)`
    pub wo: Tensor,
    pub q_gain: Option<Tensor>,
    pub k_gain: Option<Tensor>,
}

impl AttentionParams {
    /// Gaussian projections; QKNorm gains (when enabled) start at 1.
    pub fn random(
        model_dim: usize,
        layout: HeadLayout,
        sigma: f64,
        qknorm: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        layout.validate()?;
        let p = Self {
            layout,
            wq: gaussian_init(&[layout.q_width(), model_dim], sigma, rng)?,
            wk: gaussian_init(&[layout.kv_width(), model_dim], sigma, rng)?,
            wv: gaussian_init(&[layout.kv_width(), model_dim], sigma, rng)?,
            wo: gaussian_init(&[model_dim, layout.q_width()], sigma, rng)?,
            q_gain: qknorm.then(|| Tensor::full(&[layout.q_width()], 1.0)),
            k_gain: qknorm.then(|| Tensor::full(&[layout.kv_width()], 1.0)),
        };
        Ok(p)
    }

    pub fn model_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let d = self.model_dim();
        let l = &self.layout;
        let expect = [
            ("wq", &self.wq, [l.q_width(), d]),
            ("wk", &self.wk, [l.kv_width(), d]),
            ("wv", &self.wv, [l.kv_width(), d]),
            ("wo", &self.wo, [d, l.q_width()]),
        ];
        for (name, t, want) in expect {
            if t.shape() != want {
                return Err(shape(format!("{name} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        if let Some(g) = &self.q_gain {
            if g.len() != l.q_width() {
                return Err(shape("query gain length"));
            }
        }
        if let Some(g) = &self.k_gain {
            if g.len() != l.kv_width() {
                return Err(shape("key gain length"));
            }
        }
        Ok(())
    }

    /// Record the parameters as tape leaves.
    pub fn record(&self, tape: &mut Tape) -> AttnVars {
        AttnVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            q_gain: self.q_gain.clone().map(|g| tape.leaf(g)),
            k_gain: self.k_gain.clone().map(|g| tape.leaf(g)),
        }
    }
}

/// Attention over a single sequence `h` (`T × d`), returning outputs and the layer trace.
pub fn attention_forward(
    h: &Tensor,
    params: &AttentionParams,
    scheme: &PositionalScheme,
) -> Result<(Tensor, LayerTrace)> {
    params.validate()?;
    let (t, d) = h.dims2()?;
    if d != params.model_dim() {
        return Err(shape(format!("input width {d}, parameters expect {}", params.model_dim())));
    }
    let mut tape = Tape::new();
    tape.set_checked(true);
    tape.set_record_logits(true);
    tape.set_scope("layer 0");
    let x = tape.leaf(h.clone());
    let vars = params.record(&mut tape);
    let block = attention_block(&mut tape, x, &vars, params.layout, scheme, 1, t)?;
    if let Some(loc) = tape.first_nonfinite() {
        return Err(Error::NonFinite { location: loc.to_string() });
    }
    let trace = LayerTrace::from_tape(&tape, block.attn, 0, h.clone(), h.clone())?;
    Ok((tape.value(block.out).clone(), trace))
}
