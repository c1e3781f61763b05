//! Scalar abstraction shared by the model, policy and integrator.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point type the simulation core is generic over (`f32` or `f64`).
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    /// Converts an `f64` literal or configuration value.
    #[inline(always)]
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 literal representable")
    }

    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where T: Float + Debug + Send + Sync + 'static {}

/// Logistic sigmoid `1 / (1 + e^-a)`.
#[inline]
pub fn sigmoid<T: Scalar>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}
