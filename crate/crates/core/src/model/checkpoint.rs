use std::collections::BTreeMap;

use super::config::ModelConfig;
use crate::attention::{AttentionParams, PositionalScheme};
use crate::error::{invalid, shape, Result};
use crate::numerics::{gaussian_init, RngState, RngStream, Tensor};

pub const EMBED: &str = "embed.weight";
pub const HEAD: &str = "head.weight";
pub const FINAL_NORM: &str = "final_norm.gain";

/// Canonical name of a per-layer parameter, e.g. `layer_param(1, "attn.wq")`.
pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

/// AdamW first and second moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    /// Number of updates applied since the moments were last reset.
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Model configuration, parameters and training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamState>,
    /// Optimizer steps taken over the checkpoint's whole history.
    pub step: usize,
    pub tokens_seen: u64,
    pub rng: Option<RngState>,
    /// Procedures applied so far, oldest first.
    pub provenance: Vec<String>,
}

/// Every parameter a config requires, with its shape, in canonical order.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.dim;
    let layout = config.layout();
    let (q, kv) = (layout.q_width(), layout.kv_width());
    let mut out = vec![(EMBED.to_string(), vec![config.vocab, d])];
    for l in 0..config.layers {
        let p = |s: &str| layer_param(l, s);
        out.push((p("attn_norm.gain"), vec![d]));
        out.push((p("attn.wq"), vec![q, d]));
        out.push((p("attn.wk"), vec![kv, d]));
        out.push((p("attn.wv"), vec![kv, d]));
        out.push((p("attn.wo"), vec![d, q]));
        if config.qk_norm.queries() {
            out.push((p("attn.q_norm.gain"), vec![q]));
        }
        if config.qk_norm.keys() {
            out.push((p("attn.k_norm.gain"), vec![kv]));
        }
        out.push((p("mlp_norm.gain"), vec![d]));
        out.push((p("mlp.w1"), vec![config.mlp_hidden, d]));
        out.push((p("mlp.w2"), vec![d, config.mlp_hidden]));
    }
    out.push((FINAL_NORM.to_string(), vec![d]));
    if !config.tied_embeddings {
        out.push((HEAD.to_string(), vec![config.vocab, d]));
    }
    out
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

/// Fresh model: Gaussian weights with `config.init_sigma`, all gains at 1.
pub fn build_model(config: &ModelConfig, rng: &mut RngStream) -> Result<Checkpoint> {
    config.validate()?;
    let mut params = BTreeMap::new();
    for (name, dims) in parameter_shapes(config) {
        let t = if is_gain(&name) {
            Tensor::full(&dims, 1.0)
        } else {
            gaussian_init(&dims, config.init_sigma, rng)?
        };
        params.insert(name, t);
    }
    Ok(Checkpoint {
        config: config.clone(),
        params,
        optimizer: None,
        step: 0,
        tokens_seen: 0,
        rng: Some(rng.state()),
        provenance: vec![format!("init:seed={},scheme={}", rng.seed(), config.scheme.name())],
    })
}

impl Checkpoint {
    /// Verify that the parameter set matches the config exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = parameter_shapes(&self.config);
        if want.len() != self.params.len() {
            return Err(invalid(format!(
                "{} parameters present, config requires {}",
                self.params.len(),
                want.len()
            )));
        }
        for (name, dims) in want {
            let t = self.params.get(&name).ok_or_else(|| invalid(format!("missing {name}")))?;
            if t.shape() != dims.as_slice() {
                return Err(shape(format!("{name} has shape {:?}, expected {dims:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| invalid(format!("no parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| invalid(format!("no parameter {name}")))
    }

    /// Output projection; the embedding table itself when embeddings are tied.
    pub fn output_head(&self) -> Result<&Tensor> {
        self.param(if self.config.tied_embeddings { EMBED } else { HEAD })
    }

    pub fn scheme(&self) -> &PositionalScheme {
        &self.config.scheme
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Attention parameters of layer `layer`.
    pub fn attention_params(&self, layer: usize) -> Result<AttentionParams> {
        if layer >= self.config.layers {
            return Err(invalid(format!("layer {layer} out of {}", self.config.layers)));
        }
        let p = |s: &str| self.param(&layer_param(layer, s)).cloned();
        let params = AttentionParams {
            layout: self.config.layout(),
            wq: p("attn.wq")?,
            wk: p("attn.wk")?,
            wv: p("attn.wv")?,
            wo: p("attn.wo")?,
            q_gain: self.params.get(&layer_param(layer, "attn.q_norm.gain")).cloned(),
            k_gain: self.params.get(&layer_param(layer, "attn.k_norm.gain")).cloned(),
        };
        params.validate()?;
        Ok(params)
    }

    /// `(w1, w2)` of layer `layer`.
    pub fn mlp_params(&self, layer: usize) -> Result<(Tensor, Tensor)> {
        Ok((
            self.param(&layer_param(layer, "mlp.w1"))?.clone(),
            self.param(&layer_param(layer, "mlp.w2"))?.clone(),
        ))
    }

    pub fn record(&mut self, entry: impl Into<String>) {
        self.provenance.push(entry.into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Preset, QkNorm};

    fn small() -> ModelConfig {
        ModelConfig::preset(Preset::Small)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = small();
        let ck = build_model(&c, &mut RngStream::new(0, "init")).unwrap();
        // vocab·d + L·(2d + 4d² + 2·4d·d) + d
        let (v, d, l) = (64, 64, 2);
        let expect = v * d + l * (2 * d + 4 * d * d + 2 * 4 * d * d) + d;
        assert_eq!(ck.parameter_count(), expect);
        assert_eq!(c.parameter_count(), expect);

        let mut q = c.clone();
        q.qk_norm = QkNorm::On;
        q.tied_embeddings = false;
        let ck = build_model(&q, &mut RngStream::new(0, "init")).unwrap();
        assert_eq!(ck.parameter_count(), q.parameter_count());
        assert_eq!(ck.parameter_count(), expect + 2 * l * d + v * d);
    }

    #[test]
    fn same_seed_same_model() {
        let a = build_model(&small(), &mut RngStream::new(5, "init")).unwrap();
        let b = build_model(&small(), &mut RngStream::new(5, "init")).unwrap();
        let c = build_model(&small(), &mut RngStream::new(6, "init")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn gains_start_at_one() {
        let mut c = small();
        c.qk_norm = QkNorm::On;
        let ck = build_model(&c, &mut RngStream::new(1, "init")).unwrap();
        for (name, t) in &ck.params {
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&g| g == 1.0), "{name}");
            }
        }
        ck.validate().unwrap();
        assert!(ck.attention_params(0).unwrap().q_gain.is_some());
        assert!(ck.attention_params(2).is_err());
    }

    #[test]
    fn tied_head_is_the_embedding() {
        let mut ck = build_model(&small(), &mut RngStream::new(2, "init")).unwrap();
        assert!(ck.output_head().unwrap().shares_storage(ck.param(EMBED).unwrap()));
        ck.param_mut(EMBED).unwrap().data_mut()[0] = 42.0;
        assert_eq!(ck.output_head().unwrap().data()[0], 42.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = small();
        c.heads = 3;
        assert!(build_model(&c, &mut RngStream::new(0, "init")).is_err());
    }
}
