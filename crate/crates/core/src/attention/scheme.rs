use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::kernels::rotate_pairs;

/// Rotary parameters: base frequencies plus optional per-frequency scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    /// Base the frequencies were derived from; absent for explicit frequencies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
    pub freqs: Vec<f64>,
    /// Per-frequency multipliers in `(0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    /// Free-form description of the scaling that produced `gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<String>,
}

impl RopeParams {
    pub fn effective_freqs(&self) -> Vec<f64> {
        match &self.gamma {
            Some(g) => self.freqs.iter().zip(g).map(|(w, g)| w * g).collect(),
            None => self.freqs.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SchemeKind {
    Nope,
    Rope(RopeParams),
    Alibi { slopes: Vec<f64> },
}

/// How position enters attention, plus an inverse temperature on the logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalScheme {
    #[serde(flatten)]
    pub kind: SchemeKind,
    #[serde(default = "unit")]
    pub temperature: f64,
}

fn unit() -> f64 {
    1.0
}

impl PositionalScheme {
    pub fn nope() -> Self {
        Self { kind: SchemeKind::Nope, temperature: 1.0 }
    }

    pub fn rope(base: f64, head_dim: usize) -> Result<Self> {
        let freqs = rope_frequencies(base, head_dim)?;
        Ok(Self {
            kind: SchemeKind::Rope(RopeParams { base: Some(base), freqs, gamma: None, scaling: None }),
            temperature: 1.0,
        })
    }

    /// Rotary scheme with explicit positive frequencies.
    pub fn rope_with_freqs(freqs: Vec<f64>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(invalid("rotary scheme needs at least one frequency"));
        }
        if freqs.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(invalid("rotary frequencies must be positive and finite"));
        }
        Ok(Self {
            kind: SchemeKind::Rope(RopeParams { base: None, freqs, gamma: None, scaling: None }),
            temperature: 1.0,
        })
    }

    pub fn alibi(num_heads: usize) -> Result<Self> {
        Ok(Self {
            kind: SchemeKind::Alibi { slopes: alibi_slopes(num_heads)? },
            temperature: 1.0,
        })
    }

    pub fn with_temperature(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {beta}")));
        }
        self.temperature = beta;
        Ok(self)
    }

    /// Replace the rotary scaling factors; the base frequencies are untouched.
    pub fn with_gamma(mut self, gamma: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let SchemeKind::Rope(params) = &mut self.kind else {
            return Err(invalid("frequency scaling applies only to rotary schemes"));
        };
        if gamma.len() != params.freqs.len() {
            return Err(shape(format!(
                "{} scaling factors for {} frequencies",
                gamma.len(),
                params.freqs.len()
            )));
        }
        if gamma.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(invalid("scaling factors must lie in (0, 1]"));
        }
        params.gamma = Some(gamma);
        params.scaling = Some(label.into());
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SchemeKind::Nope => "nope",
            SchemeKind::Rope(_) => "rope",
            SchemeKind::Alibi { .. } => "alibi",
        }
    }

    pub fn is_nope(&self) -> bool {
        matches!(self.kind, SchemeKind::Nope)
    }

    pub fn rope_params(&self) -> Option<&RopeParams> {
        match &self.kind {
            SchemeKind::Rope(p) => Some(p),
            _ => None,
        }
    }

    /// Scaled rotary frequencies, if rotary.
    pub fn effective_freqs(&self) -> Option<Vec<f64>> {
        self.rope_params().map(RopeParams::effective_freqs)
    }

    pub fn alibi_slopes(&self) -> Option<&[f64]> {
        match &self.kind {
            SchemeKind::Alibi { slopes } => Some(slopes),
            _ => None,
        }
    }

    /// Scaling label for reports: `"none"` when unscaled.
    pub fn scaling_label(&self) -> String {
        self.rope_params()
            .and_then(|p| p.scaling.clone())
            .unwrap_or_else(|| "none".into())
    }

    /// Check the scheme against a head geometry.
    pub fn validate(&self, heads: usize, head_dim: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be positive"));
        }
        match &self.kind {
            SchemeKind::Nope => Ok(()),
            SchemeKind::Rope(p) => {
                if head_dim % 2 != 0 || p.freqs.len() * 2 != head_dim {
                    return Err(shape(format!(
                        "rotary scheme has {} frequencies but head_dim is {head_dim}",
                        p.freqs.len()
                    )));
                }
                Ok(())
            }
            SchemeKind::Alibi { slopes } => {
                if slopes.len() != heads {
                    return Err(shape(format!("{} ALiBi slopes for {heads} heads", slopes.len())));
                }
                Ok(())
            }
        }
    }
}

/// `ω_m = base^{-2(m-1)/head_dim}` for `m = 1..head_dim/2`.
pub fn rope_frequencies(base: f64, head_dim: usize) -> Result<Vec<f64>> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(invalid(format!("head_dim must be even and positive, got {head_dim}")));
    }
    if !(base > 1.0 && base.is_finite()) {
        return Err(invalid(format!("rotary base must exceed 1, got {base}")));
    }
    Ok((0..head_dim / 2)
        .map(|m| base.powf(-2.0 * m as f64 / head_dim as f64))
        .collect())
}

/// Rotate each pair `(2m, 2m+1)` of `vec` by `position·freqs[m]`.
pub fn rope_rotate(vec: &[f64], position: i64, freqs: &[f64]) -> Result<Vec<f64>> {
    if vec.len() != 2 * freqs.len() {
        return Err(shape(format!(
            "vector of length {} cannot be rotated by {} frequencies",
            vec.len(),
            freqs.len()
        )));
    }
    let (sin, cos): (Vec<f64>, Vec<f64>) =
        freqs.iter().map(|w| (position as f64 * w).sin_cos()).unzip();
    let mut out = vec.to_vec();
    rotate_pairs(&mut out, &cos, &sin, false);
    Ok(out)
}

/// Geometric ALiBi slopes `2^{-8h/H}` for `h = 1..H`.
pub fn alibi_slopes(num_heads: usize) -> Result<Vec<f64>> {
    if num_heads == 0 {
        return Err(invalid("ALiBi needs at least one head"));
    }
    Ok((1..=num_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / num_heads as f64))
        .collect())
}

/// ALiBi additive logit for query `i`, key `j` of head `head_index` (0-based).
pub fn alibi_bias(head_index: usize, num_heads: usize, i: usize, j: usize) -> Result<f64> {
    if j > i {
        return Err(invalid(format!("key {j} is after query {i}")));
    }
    if head_index >= num_heads {
        return Err(invalid(format!("head {head_index} out of {num_heads}")));
    }
    let slope = alibi_slopes(num_heads)?[head_index];
    Ok(-slope * (i - j) as f64)
}
