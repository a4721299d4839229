//! Transformer speech recognition with cross-layer weight and attention-score
//! multiplexing, built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod audit;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod multiplex;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Graph, Mode, Param, Var};
pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use model::Model;
pub use multiplex::{ParamRegistry, SharingMode};
pub use tensor::{Element, Tensor};
