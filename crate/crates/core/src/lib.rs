//! Unsupervised multi-object segmentation with attention maps and soft-argmax.

pub mod autodiff;
pub mod background;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod feature_generator;
pub mod localization;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod renderer;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Precision, Real, Tensor, Var};
pub use error::{Error, Result};
