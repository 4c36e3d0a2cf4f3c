//! Convolutional mesh regression: a graph CNN regressing template-mesh vertex
//! coordinates from rendered images, a parameter regressor recovering body
//! model pose and shape from the regressed mesh, and the synthetic data,
//! training and evaluation machinery around them.

pub mod bodymodel;
pub mod container;
pub mod diffcore;
pub mod error;
pub mod gradsuite;
pub mod meshgraph;
pub mod metrics;
pub mod regressor;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
