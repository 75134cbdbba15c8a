use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use super::gradients::{bias_gradients_analytic, HeadProjections};
use super::weights::{
    deviation_weights, diagonal_weights, offdiagonal_weights, positional_bias, BiasWeights,
    WeightsKind,
};
use crate::attention::{rope_rotate, AttentionParams, AttentionTrace, PositionalScheme};
use crate::error::{invalid, Result};
use crate::numerics::{dot, Tensor};

/// Standard weights of `kind` for attention matrix `alpha`.
pub fn weights_for(kind: WeightsKind, alpha: &Tensor) -> Result<BiasWeights> {
    match kind {
        WeightsKind::Diagonal => diagonal_weights(alpha.rows()),
        WeightsKind::OffDiagonal => offdiagonal_weights(alpha.rows()),
        WeightsKind::Deviation => deviation_weights(alpha),
        WeightsKind::Custom => Err(invalid("custom weights must be supplied explicitly")),
    }
}

/// `A^c` for every layer and head, plus the most positional head of each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBiasProfile {
    pub kind: WeightsKind,
    /// `values[layer][head]`
    pub values: Vec<Vec<f64>>,
    pub argmax: Vec<usize>,
}

pub fn head_bias_profile(trace: &AttentionTrace, kind: WeightsKind) -> Result<HeadBiasProfile> {
    let mut values = Vec::new();
    let mut argmax = Vec::new();
    for layer in &trace.layers {
        let row = layer
            .heads
            .iter()
            .map(|m| positional_bias(&m.weights, &weights_for(kind, &m.weights)?))
            .collect::<Result<Vec<f64>>>()?;
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (h, &v)| if v > acc.1 { (h, v) } else { acc })
            .0;
        argmax.push(best);
        values.push(row);
    }
    Ok(HeadBiasProfile { kind, values, argmax })
}

/// Attention of query `query_position` over the keys in `key_range`.
pub fn attention_profile(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    query_position: usize,
    key_range: Range<usize>,
) -> Result<Vec<f64>> {
    let w = trace.weights(layer, head)?;
    if query_position >= w.rows() {
        return Err(invalid(format!("query {query_position} beyond length {}", w.rows())));
    }
    if key_range.start > key_range.end || key_range.end > query_position + 1 {
        return Err(invalid(format!(
            "key range {key_range:?} not within 0..={query_position}"
        )));
    }
    Ok(w.row(query_position)[key_range].to_vec())
}

/// Bias and gradient norms of one head, as written to the bias CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadBiasRow {
    pub layer: usize,
    pub head: usize,
    pub weights_kind: String,
    pub bias: f64,
    pub grad_norm_q: f64,
    pub grad_norm_k: f64,
}

impl HeadBiasRow {
    pub fn grad_norm(&self) -> f64 {
        self.grad_norm_q.hypot(self.grad_norm_k)
    }
}

/// Per-head query/key projection slices of a layer.
pub fn head_projections(params: &AttentionParams, head: usize) -> Result<(Tensor, Tensor)> {
    let l = &params.layout;
    if head >= l.heads {
        return Err(invalid(format!("head {head} out of {}", l.heads)));
    }
    let dk = l.head_dim;
    let g = l.kv_head(head);
    Ok((params.wq.row_block(head * dk, dk)?, params.wk.row_block(g * dk, dk)?))
}

/// Analytic bias gradients of every head in a trace with respect to its own projections.
pub fn trace_bias_gradients(
    trace: &AttentionTrace,
    layers: &[&AttentionParams],
    scheme: &PositionalScheme,
    kind: WeightsKind,
) -> Result<Vec<HeadBiasRow>> {
    if layers.len() != trace.num_layers() {
        return Err(invalid("one parameter set per traced layer is required"));
    }
    let mut rows = Vec::new();
    for (l, (lt, params)) in trace.layers.iter().zip(layers).enumerate() {
        if params.q_gain.is_some() || params.k_gain.is_some() {
            return Err(invalid("analytic bias gradients do not cover query/key normalization"));
        }
        for (h, map) in lt.heads.iter().enumerate() {
            let (wq, wk) = head_projections(params, h)?;
            let weights = weights_for(kind, &map.weights)?;
            let g = bias_gradients_analytic(
                &lt.normed,
                HeadProjections { wq: &wq, wk: &wk, head: h },
                scheme,
                &weights,
            )?;
            rows.push(HeadBiasRow {
                layer: l,
                head: h,
                weights_kind: kind.to_string(),
                bias: g.bias,
                grad_norm_q: g.dwq.frobenius(),
                grad_norm_k: g.dwk.frobenius(),
            });
        }
    }
    Ok(rows)
}

/// Write `(layer, head, weights_kind, bias, grad_norm_q, grad_norm_k)` rows.
pub fn write_bias_csv(path: &Path, rows: &[HeadBiasRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of probing a rotary head on a constant input.
#[derive(Clone, Debug, PartialEq)]
pub enum Nonuniformity {
    /// Row `row` (0-based) has logits with positive variance.
    Witness { row: usize, variance: f64 },
    /// Logits are uniform at every row.
    Uniform,
    /// No frequency block has both a nonzero query and key component.
    Degenerate,
}

impl Nonuniformity {
    pub fn is_nonuniform(&self) -> bool {
        matches!(self, Nonuniformity::Witness { .. })
    }
}

/// Search for a row whose rotary logits vary when every token equals `token`.
pub fn rope_nonuniformity_check(
    wq: &Tensor,
    wk: &Tensor,
    token: &[f64],
    t: usize,
    freqs: &[f64],
) -> Result<Nonuniformity> {
    let dk = 2 * freqs.len();
    if t < dk + 1 {
        return Err(invalid(format!("need at least head_dim + 1 = {} positions, got {t}", dk + 1)));
    }
    let q = wq.matvec(token)?;
    let k = wk.matvec(token)?;
    if q.len() != dk || k.len() != dk {
        return Err(invalid("projection height must equal head_dim"));
    }
    let live = (0..freqs.len()).any(|m| {
        (q[2 * m] != 0.0 || q[2 * m + 1] != 0.0) && (k[2 * m] != 0.0 || k[2 * m + 1] != 0.0)
    });
    if !live {
        return Ok(Nonuniformity::Degenerate);
    }
    let scale = (dot(&q, &q) * dot(&k, &k)).max(f64::MIN_POSITIVE);
    for i in 0..t {
        let qi = rope_rotate(&q, i as i64, freqs)?;
        let s: Vec<f64> = (0..=i)
            .map(|j| Ok(dot(&qi, &rope_rotate(&k, j as i64, freqs)?)))
            .collect::<Result<_>>()?;
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let variance = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / s.len() as f64;
        if variance > 1e-20 * scale {
            return Ok(Nonuniformity::Witness { row: i, variance });
        }
    }
    Ok(Nonuniformity::Uniform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{rope_frequencies, HeadMap, LayerTrace};
    use crate::numerics::{gaussian_init, RngStream};

    fn trace_from(maps: Vec<Tensor>) -> AttentionTrace {
        let t = maps[0].rows();
        AttentionTrace {
            layers: vec![LayerTrace {
                hidden: Tensor::zeros(&[t, 2]),
                normed: Tensor::zeros(&[t, 2]),
                heads: maps
                    .into_iter()
                    .map(|w| HeadMap { logits: Tensor::zeros(&[t, t]), weights: w })
                    .collect(),
            }],
        }
    }

    fn uniform(t: usize) -> Tensor {
        let mut d = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..=i {
                d[i * t + j] = 1.0 / (i + 1) as f64;
            }
        }
        Tensor::matrix(t, t, d).unwrap()
    }

    #[test]
    fn uniform_trace_profile_is_zero() {
        let tr = trace_from(vec![uniform(6), uniform(6)]);
        for kind in [WeightsKind::Diagonal, WeightsKind::OffDiagonal, WeightsKind::Deviation] {
            let p = head_bias_profile(&tr, kind).unwrap();
            assert!(p.values[0].iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn identity_head_is_selected() {
        let t = 8;
        let tr = trace_from(vec![uniform(t), Tensor::identity(t), uniform(t)]);
        let p = head_bias_profile(&tr, WeightsKind::Diagonal).unwrap();
        assert_eq!(p.argmax, vec![1]);
        assert!((p.values[0][1] - (t - 1) as f64 / t as f64).abs() < 1e-15);
    }

    #[test]
    fn profile_slices() {
        let tr = trace_from(vec![uniform(6)]);
        let full = attention_profile(&tr, 0, 0, 5, 0..6).unwrap();
        assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let part = attention_profile(&tr, 0, 0, 5, 2..5).unwrap();
        assert!(part.iter().all(|&w| w == 1.0 / 6.0));
        assert!(attention_profile(&tr, 0, 0, 5, 0..7).is_err());
        assert!(attention_profile(&tr, 0, 0, 6, 0..1).is_err());
        assert!(attention_profile(&tr, 0, 1, 5, 0..1).is_err());
    }

    #[test]
    fn random_rope_head_is_nonuniform() {
        let mut rng = RngStream::new(1, "head");
        let w = rope_frequencies(10_000.0, 8).unwrap();
        let wq = gaussian_init(&[8, 8], 1.0, &mut rng).unwrap();
        let wk = gaussian_init(&[8, 8], 1.0, &mut rng).unwrap();
        let token: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        assert!(rope_nonuniformity_check(&wq, &wk, &token, 16, &w).unwrap().is_nonuniform());

        let zero = Tensor::zeros(&[8, 8]);
        assert_eq!(
            rope_nonuniformity_check(&zero, &wk, &token, 16, &w).unwrap(),
            Nonuniformity::Degenerate
        );

        let mut one_block = wq.clone();
        one_block.data_mut()[..16].fill(0.0);
        assert!(rope_nonuniformity_check(&one_block, &wk, &token, 16, &w).unwrap().is_nonuniform());
        assert!(rope_nonuniformity_check(&wq, &wk, &token, 8, &w).is_err());
    }
}
