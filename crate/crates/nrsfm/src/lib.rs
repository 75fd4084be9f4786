//! Per-frame 3D shapes and orthographic cameras from 2D point tracks.
//!
//! The model is a multi-layer block-sparse encoder/decoder trained by
//! plain gradient descent with hand-written reverse-mode gradients.
//! Reference ISTA solvers, dictionary diagnostics, synthetic data
//! generation, evaluation metrics, and the CLI plumbing live in their
//! own modules.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod numerics;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
