//! A small decoder-only language model over either token interface.

mod config;
mod params;
mod transformer;

pub use config::{default_d_ff, BlockStyle, ModelConfig, NORM_EPS, ROPE_BASE};
pub use params::{body_specs, head_specs, param_count, param_specs, ParamCount, ParamSpec};
pub use transformer::{ForwardOutput, Injection, LmBatch, StepStats, TokenBatch, ToyTransformer};
