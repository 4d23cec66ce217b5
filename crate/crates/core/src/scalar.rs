//! Scalar abstraction for voxel intensities.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point voxel intensity.
///
/// Implemented for `f32` and `f64`. Volume storage, normalization and
/// perturbation are written against this trait; accumulations that span a
/// whole volume (means, centroids) are carried out in `f64` regardless of the
/// storage type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_f32_bits(x: f32) -> Self;

    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f32_bits(x: f32) -> Self {
        x
    }

    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f32_bits(x: f32) -> Self {
        f64::from(x)
    }

    fn as_f32(self) -> f32 {
        self as f32
    }
}
