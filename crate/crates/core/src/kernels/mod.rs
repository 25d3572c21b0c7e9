//! Forward/backward value kernels behind the tape operations.
//!
//! Kernels are pure functions on plain tensors; the tape records which one
//! produced each node and calls the matching backward during reverse sweep.
//! All loops run in a fixed order (or over disjoint output slices when
//! parallel), so results are bit-reproducible.

pub mod conv;
pub mod detect;
pub mod imitation;
pub mod pool;
pub mod resize;
