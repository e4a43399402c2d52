use num_traits::{Float, FromPrimitive};

/// Floating point element type for tensors and tapes.
///
/// All numeric kernels are written against this trait so the same code
/// runs at f32 or f64 precision. The crate-root aliases fix f64, which is
/// what every estimator and bound evaluation in this crate uses.
pub trait Scalar:
    Float + FromPrimitive + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Threshold below which a gradient norm is treated as degenerate.
    fn degenerate_norm() -> Self {
        Self::from_f64(1e-12).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
