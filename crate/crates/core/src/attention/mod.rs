//! Causal multi-head attention with pluggable positional schemes.

mod block;
mod scheme;

pub use block::{
    attention_block, attention_forward, AttentionParams, AttentionTrace, AttnVars, BlockOutput,
    HeadLayout, HeadMap, LayerTrace,
};
pub use scheme::{
    alibi_bias, alibi_slopes, rope_frequencies, rope_rotate, PositionalScheme, RopeParams,
    SchemeKind,
};
