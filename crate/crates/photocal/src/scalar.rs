use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the calibration math is generic over: `f32` or `f64`.
pub trait Scalar:
    nalgebra::RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync
{
    /// Convert an `f64` constant to the working precision.
    #[inline]
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
