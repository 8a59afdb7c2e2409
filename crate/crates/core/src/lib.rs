//! Spatiotemporal transformer imputation.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`tensor`]), dataset I/O ([`dataio`]), tile and window segmentation
//! ([`segmentation`]), missingness injection ([`masking`]), the model itself
//! ([`encoder`], [`attention`], [`model`]), self-supervised optimization
//! ([`training`]), scoring and classical baselines ([`evaluation`]), the
//! variogram tile-size procedure ([`variogram`]) and synthetic data
//! ([`synthgen`]). The [`cli`] module backs the `stimpute` binary.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod dataio;
pub mod segmentation;
pub mod masking;
pub mod nn;
pub mod encoder;
pub mod attention;
pub mod model;
pub mod training;
pub mod synthgen;
pub mod evaluation;
pub mod variogram;
pub mod cli;

pub use error::{Error, Result};
pub use rng::Rng;
