//! Attention Fusion Reverse Distillation (AFRD) for multi-lighting image
//! anomaly detection.
//!
//! A frozen teacher encoder extracts feature pyramids from each lighting of
//! an image set, an attention module fuses them into one pyramid, and a
//! student decoder is trained to regress the fused features from a compact
//! bottleneck embedding. At inference, per-position regression errors
//! (1 − cosine similarity) are the anomaly scores.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff tensor
//! engine ([`tensor`]), the AFRD network ([`model`]), the distillation
//! trainer ([`train`]), anomaly scoring and AUROC evaluation ([`score`]),
//! a deterministic synthetic multi-lighting dataset generator ([`data`]),
//! and an ablation harness ([`pipeline`]).

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod pipeline;
pub mod score;
pub mod tensor;
pub mod train;

pub use data::{DatasetIndex, SceneSpec};
pub use model::{AfrdModel, AttentionWeights, FeaturePyramid, FusionMode, ImageSet, Label, ModelConfig};
pub use score::{AnomalyResult, EvalReport};
pub use tensor::{Real, Tensor, TensorError};
pub use train::{TrainConfig, TrainReport};
