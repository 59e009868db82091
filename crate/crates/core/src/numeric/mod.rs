//! Minimal dense tensor algebra with a recorded reverse-mode tape.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in `f64`
//! (the default everywhere gradients are checked) or `f32`.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::{derive_seed, seeded_rng, SeedRng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type of every tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T, E = NumericError> = std::result::Result<T, E>;

/// GeLU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + S::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        // closed form evaluated independently
        let c = (2.0f64 / std::f64::consts::PI).sqrt();
        let expected = 0.5 * (1.0 + (c * (1.0 + 0.044715)).tanh());
        assert!((gelu_scalar(1.0f64) - expected).abs() < 1e-15);
        assert!((gelu_scalar(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn f32_gelu_agrees_with_f64() {
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            let lo = gelu_scalar(x as f32) as f64;
            assert!((lo - gelu_scalar(x)).abs() < 1e-5);
        }
    }
}
