//! Canopy height mapping from patch-level image features.
//!
//! The crate covers the whole chain: a small differentiable array engine
//! ([`numerics`]), view transforms ([`augment`]), self-supervised feature
//! upsampling ([`enhance`]), the convolutional height estimator
//! ([`height_head`]), synthetic plantation scenes ([`scenegen`]), raster
//! evaluation ([`evalmetrics`]), tree detection and biomass allometry
//! ([`forestry`]), and the file formats shared with the command line
//! ([`raster`], [`features`], [`config`]).

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod augment;
pub mod config;
pub mod enhance;
pub mod evalmetrics;
pub mod features;
pub mod forestry;
pub mod height_head;
pub mod raster;
pub mod scenegen;
