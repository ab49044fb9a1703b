//! Block-wise self-supervised neural architecture search at desk scale.
//!
//! Siamese weight-sharing supernets are trained block by block with ensemble
//! bootstrapping, candidate architectures are rated without labels by their
//! distance to a population-center ensemble, and a brute-force oracle harness
//! measures how well those ratings rank architectures.

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod pipeline;
pub mod ranking;
pub mod space;
pub mod substrate;
pub mod trainer;

pub use error::{Error, Result};
