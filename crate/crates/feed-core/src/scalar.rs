//! Scalar abstraction: the tensor stack is generic over the float type.

use num_traits::Float;

/// Floating-point scalar usable by the tensor and autodiff machinery.
///
/// Implemented for `f32` and `f64`; the rest of the workspace pins the
/// 64-bit aliases exported from the crate root.
pub trait Scalar:
    Float + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(value: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(value: f64) -> Self {
        value as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(value: f64) -> Self {
        value
    }

    fn as_f64(self) -> f64 {
        self
    }
}
