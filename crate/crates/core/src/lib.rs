//! Single-view point-cloud reconstruction by deforming a sphere prior under
//! per-stage geometric styles and disentangled semantic codes.

pub mod attribute_flow;
pub mod config;
pub mod encoders;
pub mod deformation;
pub mod error;
pub mod geometry;
pub mod image;
pub mod manipulation;
pub mod nn;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
