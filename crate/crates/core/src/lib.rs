//! Next-patch-prediction training lab.
//!
//! A small decoder-only transformer trained on 2D token grids under a
//! coarse-to-fine patch curriculum, together with the compute accounting
//! and synthetic data needed to check it end to end on a CPU.

pub mod cli;
pub mod costmodel;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod objective;
pub mod patching;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{NppError, Result};
