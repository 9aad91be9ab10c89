//! Minimal f32 tensor and reverse-mode autodiff engine.
//!
//! Everything the two networks need lives here: a row-major [`Tensor`], a
//! recording [`Graph`] whose backward pass fills a [`ParamStore`], Adam, and
//! the single-file checkpoint format. Layout is NCHW throughout.

pub mod checkpoint;
pub mod graph;
pub mod init;
pub mod linalg;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_params, save_params, Checkpoint, FORMAT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamStore};
pub use tensor::Tensor;
