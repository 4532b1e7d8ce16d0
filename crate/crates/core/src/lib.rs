//! ViTAE: a vision transformer whose reduction cells embed multi-scale context
//! through dilated convolution pyramids and whose cells run a convolutional
//! branch in parallel with self-attention.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), the architecture ([`model`]), a training harness ([`train`]),
//! dataset loading and generation ([`data`]) and analysis tools ([`analysis`]).

pub mod analysis;
pub mod data;
pub mod error;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, ModelConfig, ParamStore};
pub use tensor::{Graph, Tensor, Var};
