use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar used by the HMM, EM and reparameterization code: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static
{
    /// Tolerance used when validating that a probability vector sums to one.
    const SIMPLEX_TOL: f64;
    /// Smallest admissible emission variance.
    const MIN_VARIANCE: f64;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {
    const SIMPLEX_TOL: f64 = 1e-5;
    const MIN_VARIANCE: f64 = 1e-37;
}

impl Scalar for f64 {
    const SIMPLEX_TOL: f64 = 1e-12;
    const MIN_VARIANCE: f64 = 1e-300;
}
