//! Scalar abstraction so the whole network runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

use ndarray::{Array2, ArrayView2};

pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Dense matrix product. `ndarray` dispatches both float types to
    /// `matrixmultiply`, which is the single compute hot spot of the crate.
    fn gemm(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self>;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("scalar conversion")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("scalar conversion")
    }
}

impl Scalar for f32 {
    fn gemm(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self> {
        a.dot(&b)
    }
}

impl Scalar for f64 {
    fn gemm(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self> {
        a.dot(&b)
    }
}

/// Shorthand used all over the numeric code.
#[inline]
pub fn s<S: Scalar>(v: f64) -> S {
    S::from_f64(v)
}
