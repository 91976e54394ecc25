//! Node-guided dynamic Gaussian splatting at desk scale.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod control;
pub mod deformer;
pub mod error;
pub mod gradcheck;
pub mod img;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod quat;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
