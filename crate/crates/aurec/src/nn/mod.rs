//! Minimal reverse-mode autodiff engine over `ndarray` tensors.

pub mod adam;
pub mod conv;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tape;

pub use adam::{Adam, AdamConfig, AdamState};
pub use params::{he_normal, normal, ones, xavier_normal, zeros, ParamId, ParamStore};
pub use scalar::{s, Scalar};
pub use tape::{Gradients, Tape, Var};
