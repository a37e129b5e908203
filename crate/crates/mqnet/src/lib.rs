//! Multi-modal product image segmentation with mutual cross-modal queries.
//!
//! A product image and its title are encoded separately, then fused per
//! backbone stage: a language-query-vision step turns every title token
//! into a spatial response map, and a vision-query-language step filters
//! those responses back into visually grounded features that feed both
//! the encoder and the decoder. Everything runs on a self-contained
//! dense-tensor engine with reverse-mode autodiff, so the whole model is
//! gradient-checkable end to end.
//!
//! See the `examples/` directory for runnable walkthroughs of each layer
//! of the stack, and the `mqnet` binary for dataset generation, training,
//! evaluation, and the ablation harness.

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod text;

pub use error::{MqError, Result};
pub use tensor::{Scalar, Tensor};
