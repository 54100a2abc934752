//! Hybrid mobile image classifier built on a small, self-contained autodiff
//! engine.
//!
//! The network stacks MBConv3 inverted-bottleneck stages (expansion,
//! depthwise 3×3, squeeze-excitation, projection) with global multi-head
//! self-attention stages whose query/key/value/output projections are grouped
//! pointwise convolutions, fusing the last local stage into the first
//! attention stage by addition. Around the network the crate provides exact
//! parameter and FLOP accounting, AdamW training, binary classification
//! metrics with stratified k-fold cross-validation, and Grad-CAM heatmaps.
//!
//! Everything runs in `f64` on the CPU so that every gradient can be checked
//! against finite differences.

pub mod autograd;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autograd::{grad_check, GradCheckConfig, GradCheckReport, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{M2ANet, ModelConfig, Preset};
pub use tensor::{Shape, Tensor};
