//! hgd-core: feature-imitation distillation for small object detectors.
//!
//! The crate bundles everything needed to distill a multi-stage single-shot
//! detector into a channel-halved student on a synthetic dataset:
//!
//! - [`tensor`] / [`tape`]: dense NCHW tensors with reverse-mode gradients
//!   for a fixed op set (conv, pooling, bilinear resize, activations,
//!   reductions and the detection/imitation loss primitives).
//! - [`matching`]: stage grouping by spatial size, one-to-one pairing of
//!   student and teacher stages, and trainable 1x1 adapters.
//! - [`imitation`]: L2/cosine per-location losses, the aggregated and the
//!   re-weighted stage sums, and the multi-task total.
//! - [`reweight`]: macro stage weights and micro spatial weight maps (focal,
//!   sigmoid statistics, ground-truth masks).
//! - [`detector`]: the toy multi-stage detector, anchor assignment, the
//!   multibox loss with hard negative mining, decoding, and checkpoints.
//! - [`data`]: deterministic synthetic scenes plus PPM/text persistence.
//! - [`eval`]: VOC-style mean average precision.
//! - [`config`] / [`train`] / [`export`]: the experiment harness.

pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod imitation;
pub mod kernels;
pub mod matching;
pub mod reweight;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
