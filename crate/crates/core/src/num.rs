//! Scalar abstraction for the model math.
//!
//! Everything downstream (channel gains, latencies, allocations) is generic
//! over a floating-point scalar so the whole pipeline can run in `f32` or
//! `f64`. Random draws are always made in `f64` and then converted, which
//! keeps the RNG stream identical across precisions: an `f32` run consumes
//! exactly the same random numbers as the `f64` run with the same seed.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used by the latency model and the optimizers.
///
/// Implemented for `f32` and `f64`. The extra bounds beyond [`Float`] are
/// what the simulator needs to print, serialize, and ship values across
/// rayon worker threads.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` into this scalar, rounding if necessary.
    ///
    /// Conversion boundaries (configs, RNG draws, literal constants) all go
    /// through here so the lossy step is explicit and greppable.
    #[inline]
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("every finite f64 converts to a Real scalar")
    }

    /// Converts this scalar to `f64` for accumulation in reports.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real scalars convert to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cast_round_trips_representable_values() {
        assert_eq!(f64::cast(0.25), 0.25);
        assert_eq!(f32::cast(0.25), 0.25f32);
        assert_eq!(f32::cast(1.0e40), f32::INFINITY);
    }

    #[test]
    fn to_f64_widens_f32_exactly() {
        let x = 0.1f32;
        assert_eq!(x.to_f64_lossy(), f64::from(x));
    }
}
