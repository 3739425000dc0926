//! Floating-point scalar abstraction shared by every numeric routine.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of tensors and model parameters.
///
/// Implemented for `f32` (training runs) and `f64` (gradient checks and
/// oracles). Everything in the crate is generic over it.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Name used in config files and checkpoint headers.
    const NAME: &'static str;

    /// Lossless for f64, rounding for f32.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Runtime precision switch read from experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}
