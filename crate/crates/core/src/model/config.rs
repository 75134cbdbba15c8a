use serde::{Deserialize, Serialize};

use crate::attention::{HeadLayout, PositionalScheme};
use crate::error::{invalid, Result};
use crate::numerics::Precision;

/// Query/key normalization variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QkNorm {
    #[default]
    Off,
    /// Normalize queries and keys.
    On,
    /// Normalize queries only (experimental).
    QueriesOnly,
}

impl QkNorm {
    pub fn queries(self) -> bool {
        !matches!(self, QkNorm::Off)
    }

    pub fn keys(self) -> bool {
        matches!(self, QkNorm::On)
    }
}

fn default_sigma() -> f64 {
    0.02
}

fn default_true() -> bool {
    true
}

/// Architecture of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub scheme: PositionalScheme,
    #[serde(default)]
    pub qk_norm: QkNorm,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_sigma")]
    pub init_sigma: f64,
    /// Training context length.
    pub context: usize,
}

/// Named architecture presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// One layer, `d = 8`, vocabulary 11: for exhaustive gradient checks.
    Tiny,
    /// Two layers, `d = 64`, vocabulary 64, context 128.
    Small,
    /// Four layers, `d = 128`, vocabulary 256, context 256.
    Medium,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            other => Err(invalid(format!("unknown preset {other:?}"))),
        }
    }
}

/// Rotary base used by the presets.
///
/// With `head_dim = 16` and a 128-token context, the three lowest frequencies turn less
/// than one full cycle over the training window and the lowest covers about 1.2 rad,
/// so doubling the input already reaches phases never seen in training. A base of
/// 10⁴ leaves those frequencies almost still at this length.
pub const PRESET_ROPE_BASE: f64 = 200.0;

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (vocab, dim, layers, heads, head_dim, context) = match preset {
            Preset::Tiny => (11, 8, 1, 2, 4, 4),
            Preset::Small => (64, 64, 2, 4, 16, 128),
            Preset::Medium => (256, 128, 4, 4, 32, 256),
        };
        Self {
            vocab,
            dim,
            layers,
            heads,
            kv_heads: heads,
            head_dim,
            mlp_hidden: 4 * dim,
            scheme: PositionalScheme::rope(PRESET_ROPE_BASE, head_dim)
                .expect("preset head_dim is even"),
            qk_norm: QkNorm::Off,
            tied_embeddings: true,
            precision: Precision::F64,
            init_sigma: 0.02,
            context,
        }
    }

    pub fn with_scheme(mut self, scheme: PositionalScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout { heads: self.heads, kv_heads: self.kv_heads, head_dim: self.head_dim }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("layers", self.layers),
            ("mlp_hidden", self.mlp_hidden),
            ("context", self.context),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        self.layout().validate()?;
        if self.heads * self.head_dim != self.dim {
            return Err(invalid(format!(
                "dim {} must equal heads × head_dim = {} × {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        if !(self.init_sigma > 0.0) {
            return Err(invalid("init_sigma must be positive"));
        }
        self.scheme.validate(self.heads, self.head_dim)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        let q = self.heads * self.head_dim;
        let kv = self.kv_heads * self.head_dim;
        let gains = if self.qk_norm.queries() { q } else { 0 } + if self.qk_norm.keys() { kv } else { 0 };
        let per_layer = d + q * d + 2 * kv * d + d * q + gains + d + 2 * self.mlp_hidden * d;
        let head = if self.tied_embeddings { 0 } else { self.vocab * d };
        self.vocab * d + head + self.layers * per_layer + d
    }
}

/// Optimization schedule and batch geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainRecipe {
    pub fn desk(total_steps: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            peak_lr: 1e-2,
            warmup_steps: (total_steps / 10).max(1).min(total_steps),
            total_steps,
            batch_size: 8,
            seq_len,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: Some(1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(invalid("warmup cannot exceed total steps"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(invalid("batch size and sequence length must be positive"));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rate and weight decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(invalid("gradient clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, recipe: &TrainRecipe) -> f64 {
    let peak = recipe.peak_lr;
    let (w, n) = (recipe.warmup_steps, recipe.total_steps);
    if step < w {
        return peak * step as f64 / w as f64;
    }
    if n <= w {
        return peak;
    }
    let progress = ((step - w) as f64 / (n - w) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let r = TrainRecipe { peak_lr: 1e-3, warmup_steps: 10, total_steps: 110, ..TrainRecipe::desk(110, 8, 0) };
        assert_eq!(cosine_lr(0, &r), 0.0);
        assert_eq!(cosine_lr(5, &r), 5e-4);
        assert_eq!(cosine_lr(10, &r), 1e-3);
        assert!((cosine_lr(60, &r) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(110, &r).abs() < 1e-18);
    }

    #[test]
    fn presets_are_consistent() {
        for p in [Preset::Tiny, Preset::Small, Preset::Medium] {
            ModelConfig::preset(p).validate().unwrap();
        }
        let small = ModelConfig::preset(Preset::Small);
        assert_eq!((small.layers, small.dim, small.heads, small.head_dim, small.vocab), (2, 64, 4, 16, 64));
        assert_eq!(small.context, 128);
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut c = ModelConfig::preset(Preset::Small);
        c.dim = 60;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset(Preset::Small);
        c.kv_heads = 3;
        assert!(c.validate().is_err());
        let r = TrainRecipe { warmup_steps: 20, ..TrainRecipe::desk(10, 8, 0) };
        assert!(r.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ModelConfig::preset(Preset::Small);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), c);
    }
}
