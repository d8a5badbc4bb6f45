//! Dual-branch cross-attention transformer for point clouds.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: tensors, a recorded reverse-mode graph, gradient checks, Adam, checkpoints.
//! * [`geometry`]: farthest point sampling and k-nearest neighbours with canonical tie-breaking.
//! * [`grouping`]: the multi-scale grouping pyramid that produces the two branches.
//! * [`attention`]: class tokens, cross-attention and the self-attention baseline.
//! * [`model`]: classifier and part-segmentation assembly, training, metrics and cost accounting.
//! * [`data`]: XYZ/OFF ingestion, mesh sampling, synthetic shapes, augmentation and splits.
//! * [`cli`]: the `pointcat` command-line driver.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod grouping;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
