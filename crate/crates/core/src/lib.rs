//! A desk-scale laboratory for positional embeddings in causal transformers.
//!
//! The crate covers rotary, scaled-rotary, ALiBi and position-free attention,
//! the attention positional-bias functional and its gradients, a small
//! trainable decoder, the drop-then-recalibrate procedure, and synthetic
//! long-context probes.

pub mod error;
pub mod numerics;
pub mod attention;
pub mod analysis;
pub mod rope_scaling;
pub mod model;
pub mod drope;
pub mod tasks;

pub use error::{Error, Result};
