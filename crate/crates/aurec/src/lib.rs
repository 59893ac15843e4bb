//! Weakly supervised facial action unit (AU) recognition.
//!
//! The crate implements a region-of-interest transformer network trained with
//! two self-supervised auxiliary tasks (symmetric RoI inpainting and
//! single-image optical-flow estimation) plus multi-label MixMatch
//! semi-supervision, so that a small labeled set and a larger unlabeled pool
//! can be combined in one end-to-end loop.
//!
//! Everything runs on the CPU over `ndarray` buffers. The numeric core is
//! generic over [`nn::Scalar`] so training runs in `f32` while gradient
//! checks run the same code in `f64`.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod semi;
pub mod trainer;
pub mod viz;
pub mod cli;

pub use config::{DataConfig, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
