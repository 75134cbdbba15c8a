use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::attention::{AttentionParams, AttentionTrace, PositionalScheme};
use crate::error::{invalid, shape, Result};
use crate::numerics::{norm2, spectral_norm, Tensor};

/// `max_{j≤i} ‖h̄_i − h_j‖` for every position and its maximum over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSpread {
    pub per_position: Vec<f64>,
    pub max: f64,
}

pub fn prefix_spread(h: &Tensor) -> Result<PrefixSpread> {
    let (t, d) = h.dims2()?;
    let mut sum = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let mut per_position = Vec::with_capacity(t);
    for i in 0..t {
        for (s, x) in sum.iter_mut().zip(h.row(i)) {
            *s += x;
        }
        let inv = 1.0 / (i + 1) as f64;
        for (m, s) in mean.iter_mut().zip(&sum) {
            *m = s * inv;
        }
        let worst = (0..=i)
            .map(|j| {
                h.row(j)
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
            .sqrt();
        per_position.push(worst);
    }
    let max = per_position.iter().copied().fold(0.0, f64::max);
    Ok(PrefixSpread { per_position, max })
}

/// Which inequality a [`BoundRow`] checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// `max_{j≤i} |s_ij − s̄_i|`
    LogitSpread,
    /// `‖α_i − u_i‖₁`
    AttentionDeviation,
    /// `‖z_i − v̄_i‖`
    OutputDeviation,
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundKind::LogitSpread => "logit-spread",
            BoundKind::AttentionDeviation => "attention-deviation",
            BoundKind::OutputDeviation => "output-deviation",
        })
    }
}

/// Largest left-hand side over query rows of one head, with its bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub layer: usize,
    pub head: usize,
    pub bound: BoundKind,
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundRow {
    pub fn violated(&self) -> bool {
        self.lhs > self.rhs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpread {
    pub layer: usize,
    /// Prefix-spread of the residual stream entering the block.
    pub delta_hidden: f64,
    /// Prefix-spread of the attention input.
    pub delta_input: f64,
    /// `max_i ‖x_i‖ / √d` of the attention input (1 for unit-gain normalization).
    pub input_radius: f64,
    /// Estimated operator-norm constant including the safety factor.
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpreadReport {
    pub layers: Vec<LayerSpread>,
    pub bounds: Vec<BoundRow>,
}

impl SpreadReport {
    pub fn violations(&self) -> Vec<&BoundRow> {
        self.bounds.iter().filter(|b| b.violated()).collect()
    }

    pub fn max_lhs(&self, kind: BoundKind) -> f64 {
        self.bounds
            .iter()
            .filter(|b| b.bound == kind)
            .map(|b| b.lhs)
            .fold(0.0, f64::max)
    }

    /// Write `(layer, head, bound_name, lhs, rhs)` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            layer: usize,
            head: usize,
            bound_name: String,
            lhs: f64,
            rhs: f64,
        }
        let mut w = csv::Writer::from_path(path)?;
        for b in &self.bounds {
            w.serialize(Row {
                layer: b.layer,
                head: b.head,
                bound_name: b.bound.to_string(),
                lhs: b.lhs,
                rhs: b.rhs,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weights of one block needed to estimate the operator-norm constant.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams<'a> {
    pub attn: &'a AttentionParams,
    /// `(W1, W2)` of the block's MLP.
    pub mlp: Option<(&'a Tensor, &'a Tensor)>,
}

/// Multiplier on the estimated constant, covering power-iteration underestimation.
pub const SAFETY_FACTOR: f64 = 1.05;
/// Upper bound on the slope of SiLU.
pub const SILU_SLOPE_BOUND: f64 = 1.1;
const POWER_ITERATIONS: usize = 200;

/// Estimated `B` for one block: the largest projection norm or MLP Lipschitz bound.
pub fn operator_constant(layer: &LayerParams<'_>) -> Result<f64> {
    let a = layer.attn;
    let mut b: f64 = 0.0;
    for w in [&a.wq, &a.wk, &a.wv, &a.wo] {
        b = b.max(spectral_norm(w, POWER_ITERATIONS)?);
    }
    if let Some((w1, w2)) = layer.mlp {
        let lip = spectral_norm(w1, POWER_ITERATIONS)? * spectral_norm(w2, POWER_ITERATIONS)?;
        b = b.max(SILU_SLOPE_BOUND * lip);
    }
    Ok(SAFETY_FACTOR * b)
}

/// Logit, attention and output uniformity of every head against their bounds.
///
/// Requires a position-free trace without query/key normalization, where every
/// bound is a consequence of Cauchy–Schwarz and softmax smoothness.
pub fn uniformity_report(
    trace: &AttentionTrace,
    layers: &[LayerParams<'_>],
    scheme: &PositionalScheme,
) -> Result<SpreadReport> {
    if !scheme.is_nope() {
        return Err(invalid("uniformity bounds apply to position-free attention only"));
    }
    if trace.num_layers() != layers.len() {
        return Err(shape(format!(
            "trace has {} layers, {} parameter sets given",
            trace.num_layers(),
            layers.len()
        )));
    }
    let beta = scheme.temperature;
    let mut out_layers = Vec::new();
    let mut bounds = Vec::new();
    for (l, (lt, lp)) in trace.layers.iter().zip(layers).enumerate() {
        let a = lp.attn;
        if a.q_gain.is_some() || a.k_gain.is_some() {
            return Err(invalid("uniformity bounds do not cover query/key normalization"));
        }
        let x = &lt.normed;
        let (t, d) = x.dims2()?;
        let dk = a.layout.head_dim;
        let delta = prefix_spread(x)?.max;
        let radius = (0..t).map(|i| norm2(x.row(i))).fold(0.0, f64::max) / (d as f64).sqrt();
        let b = operator_constant(lp)?;
        let rho = beta * b * b * (d as f64 / dk as f64).sqrt() * radius * delta;
        let out_bound = b * delta * rho;
        out_layers.push(LayerSpread {
            layer: l,
            delta_hidden: prefix_spread(&lt.hidden)?.max,
            delta_input: delta,
            input_radius: radius,
            b,
        });
        let v_all = x.matmul(&a.wv.transpose()?)?;
        for (h, map) in lt.heads.iter().enumerate() {
            let g = a.layout.kv_head(h);
            let mut logit_lhs: f64 = 0.0;
            let mut attn_lhs: f64 = 0.0;
            let mut out_lhs: f64 = 0.0;
            let mut vsum = vec![0.0; dk];
            for i in 0..t {
                let s = &map.logits.row(i)[..=i];
                let alpha = &map.weights.row(i)[..=i];
                let mean = s.iter().sum::<f64>() / s.len() as f64;
                logit_lhs = logit_lhs.max(s.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max));
                let u = 1.0 / (i + 1) as f64;
                attn_lhs = attn_lhs.max(alpha.iter().map(|x| (x - u).abs()).sum());
                for (acc, v) in vsum.iter_mut().zip(&v_all.row(i)[g * dk..(g + 1) * dk]) {
                    *acc += v;
                }
                let mut diff: Vec<f64> = vsum.iter().map(|s| -s * u).collect();
                for (j, aj) in alpha.iter().enumerate() {
                    for (dd, v) in diff.iter_mut().zip(&v_all.row(j)[g * dk..(g + 1) * dk]) {
                        *dd += aj * v;
                    }
                }
                out_lhs = out_lhs.max(norm2(&diff));
            }
            for (bound, lhs, rhs) in [
                (BoundKind::LogitSpread, logit_lhs, rho),
                (BoundKind::AttentionDeviation, attn_lhs, rho),
                (BoundKind::OutputDeviation, out_lhs, out_bound),
            ] {
                bounds.push(BoundRow { layer: l, head: h, bound, lhs, rhs });
            }
        }
    }
    Ok(SpreadReport { layers: out_layers, bounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_forward, HeadLayout};
    use crate::numerics::{gaussian_init, RngStream};
    use proptest::prelude::*;

    #[test]
    fn constant_rows_have_zero_spread() {
        let h = Tensor::from_rows(&vec![vec![1.0, -2.0, 3.0]; 5]).unwrap();
        let s = prefix_spread(&h).unwrap();
        assert_eq!(s.max, 0.0);
    }

    #[test]
    fn opposite_unit_rows() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let s = prefix_spread(&h).unwrap();
        assert_eq!(s.per_position, vec![0.0, 1.0]);
        assert_eq!(s.max, 1.0);
    }

    #[test]
    fn duplicating_a_row_can_raise_spread() {
        // rows (0), (2): spread 1. Appending another (2) moves the mean to 4/3.
        let a = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![2.0], vec![2.0]]).unwrap();
        assert_eq!(prefix_spread(&a).unwrap().max, 1.0);
        assert!((prefix_spread(&b).unwrap().max - 4.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn spread_zero_iff_rows_identical(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..8)) {
            let h = Tensor::from_rows(&rows).unwrap();
            let s = prefix_spread(&h).unwrap().max;
            let identical = rows.iter().all(|r| r == &rows[0]);
            prop_assert_eq!(s == 0.0, identical);
        }

        #[test]
        fn spread_of_a_prefix_never_exceeds_the_whole(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..8),
            cut in 1usize..8,
        ) {
            let cut = cut.min(rows.len());
            let full = prefix_spread(&Tensor::from_rows(&rows).unwrap()).unwrap().max;
            let part = prefix_spread(&Tensor::from_rows(&rows[..cut]).unwrap()).unwrap().max;
            prop_assert!(part <= full);
        }

        #[test]
        fn spread_is_translation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..8),
            shift in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let a = prefix_spread(&Tensor::from_rows(&rows).unwrap()).unwrap().max;
            let moved: Vec<Vec<f64>> = rows.iter()
                .map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect())
                .collect();
            let b = prefix_spread(&Tensor::from_rows(&moved).unwrap()).unwrap().max;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    fn single_layer_report(h: &Tensor, seed: u64) -> SpreadReport {
        let layout = HeadLayout::new(4, 4, 4).unwrap();
        let mut rng = RngStream::new(seed, "init");
        let p = AttentionParams::random(16, layout, 0.3, false, &mut rng).unwrap();
        let scheme = PositionalScheme::nope();
        let (_, lt) = attention_forward(h, &p, &scheme).unwrap();
        let trace = AttentionTrace { layers: vec![lt] };
        uniformity_report(&trace, &[LayerParams { attn: &p, mlp: None }], &scheme).unwrap()
    }

    #[test]
    fn bounds_hold_for_random_inputs() {
        let mut rng = RngStream::new(9, "hidden");
        let h = gaussian_init(&[20, 16], 1.0, &mut rng).unwrap();
        let r = single_layer_report(&h, 1);
        assert_eq!(r.bounds.len(), 12);
        assert!(r.violations().is_empty(), "{:?}", r.violations());
        assert!(r.bounds.iter().all(|b| b.lhs >= 0.0 && b.rhs >= 0.0));
    }

    #[test]
    fn constant_input_has_zero_lhs() {
        let h = Tensor::from_rows(&vec![(0..16).map(|c| c as f64 * 0.1 - 0.7).collect(); 12]).unwrap();
        let r = single_layer_report(&h, 2);
        for b in &r.bounds {
            assert!(b.lhs <= 1e-14, "{b:?}");
        }
    }

    #[test]
    fn positional_traces_rejected() {
        let trace = AttentionTrace::default();
        assert!(uniformity_report(&trace, &[], &PositionalScheme::rope(10.0, 4).unwrap()).is_err());
    }
}
