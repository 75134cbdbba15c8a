//! The attention positional-bias functional, its gradients, and uniformity diagnostics.

mod gradients;
mod heads;
mod spread;
mod weights;

pub use gradients::{
    bias_gradients_analytic, head_attention, head_bias, BiasGradients, HeadProjections,
};
pub use heads::{
    attention_profile, head_bias_profile, head_projections, rope_nonuniformity_check,
    trace_bias_gradients, weights_for, write_bias_csv, HeadBiasProfile, HeadBiasRow,
    Nonuniformity,
};
pub use spread::{
    operator_constant, prefix_spread, uniformity_report, BoundKind, BoundRow, LayerParams,
    LayerSpread, PrefixSpread, SpreadReport, SAFETY_FACTOR, SILU_SLOPE_BOUND,
};
pub use weights::{
    deviation_weights, diagonal_weights, offdiagonal_weights, positional_bias,
    sign_deviation_weights, BiasWeights, WeightsKind,
};
