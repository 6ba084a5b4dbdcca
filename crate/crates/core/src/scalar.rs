use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical routines are generic over.
///
/// `RealField` supplies the arithmetic and the decompositions; the two
/// conversion helpers exist because hyperparameters and on-disk data are
/// always carried as `f64`/`f32` regardless of the working precision.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Machine epsilon of the type.
    fn eps() -> Self;

    /// Convergence tolerance handed to the iterative decompositions.
    ///
    /// Matches the library's own default of five ulps; a bare machine
    /// epsilon can make the bidiagonal SVD return wrong singular values.
    fn decomp_tol() -> Self {
        Self::eps() * Self::of(5.0)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn eps() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn eps() -> Self {
        f32::EPSILON
    }
}
