//! Config-driven ViTAE construction and execution.

mod build;
mod cells;
mod config;
mod forward;
mod layers;
mod params;
mod pos;

pub use build::{build_model, ModelPlan};
pub use cells::{model_forward, nc_forward, rc_forward};
pub use config::{
    Fusion, ModelConfig, NcConfig, ParallelBranch, PosEmbeddingKind, RcConfig, PRESET_NAMES,
};
pub use forward::{
    apply_bn_updates, run_model, AttentionCapture, AttentionOverride, BnUpdate, Forward,
    ForwardOptions, Mode,
};
pub use layers::{ffn_forward, mhsa_forward, pcm_forward, prm_forward, PcmSpec};
pub use params::{Param, ParamGrads, ParamKind, ParamStore};
pub use pos::sinusoid_pos_encoding;

/// Epsilon of every layer normalization.
pub const LN_EPS: f64 = 1e-6;
/// Epsilon of every batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
