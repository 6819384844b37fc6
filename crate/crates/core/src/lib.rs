//! Continuous video sequence recognition with motor-attention gating and
//! frame-level self-distillation, trained end to end with CTC.

pub mod adam;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod export;
mod gemm;
pub mod graph;
mod kernels;
pub mod mam;
pub mod metrics;
pub mod model;
pub mod params;
pub mod temporal;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
