//! Scalar abstraction so the same model code runs in f32 for training and
//! f64 for finite-difference fixtures.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: Float
        + LinalgScalar
        + ScalarOperand
        + NumAssignOps
        + std::iter::Sum
        + std::fmt::Debug
        + std::fmt::Display
        + Send
        + Sync
        + 'static
{
}

/// Lossless-enough constant conversion; panics only on NaN inputs, which are
/// never used as constants.
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    F::from(x).expect("constant conversion")
}
