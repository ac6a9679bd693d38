//! Meta-learner with linear nulling (MLN).
//!
//! Episodic training of an embedding network jointly with a bank of
//! class-reference vectors. Classification projects onto the null space of
//! per-class error vectors and measures distances there.
//!
//! Library layout:
//! - [`num`]: matrices, seeded RNG, null-space/pseudo-inverse kernels, and a
//!   tape-based reverse-mode differentiation engine.
//! - [`head`]: prototypes, error vectors, the episode-specific null
//!   projector, and projected-distance logits.
//! - [`embedding`]: a configurable affine+ReLU embedding network.
//! - [`episodes`]: episode sampling from synthetic generators or ingested
//!   raster datasets, with 90-degree rotation augmentation.
//! - [`trainer`]: the episodic training loop (Adam, step-decay learning
//!   rate) and binary checkpoints.
//! - [`eval`]: reference-subset relabeling, accuracy with 95% confidence
//!   intervals, and projector diagnostics.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod episodes;
pub mod eval;
pub mod error;
pub mod embedding;
pub mod head;
pub mod num;
pub mod trainer;
