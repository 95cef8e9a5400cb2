//! Semi-supervised spatiotemporal bounding-box detection engine.
//!
//! A tied-weight 3D convolutional encoder-decoder with an anchor-grid
//! regression head, plus everything needed to exercise it end to end at desk
//! scale: a from-scratch autodiff tensor core, Adam training, a synthetic
//! multichannel event generator, and mAP evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod optim;
pub mod overlay;
pub mod tensor;
pub mod train;
pub mod verify;

pub use cli::run_cli;
pub use error::{Error, Result};
