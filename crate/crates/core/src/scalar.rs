//! Element type abstraction shared by every tensor, layer and metric.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type: `f32`, `f64`, or the double-double
/// [`TwoFloat`] used as a high-precision reference.
///
/// Hyperparameters live in configs as `f64` and are converted once with
/// [`Scalar::of`]; reports and metrics come back out through [`Scalar::as_f64`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Short tag stored in checkpoints so a file is never loaded into the wrong width.
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("every f64 has a nearest representable value")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float widens to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

pub use twofloat::TwoFloat;

impl Scalar for TwoFloat {
    const NAME: &'static str = "f64x2";

    // The `FromPrimitive` default for `f64` truncates to an integer.
    fn of(x: f64) -> Self {
        TwoFloat::from(x)
    }
}

/// Sum of an iterator, accumulated left to right.
pub fn total<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    values.into_iter().fold(T::zero(), |acc, x| acc + x)
}

/// Logistic function evaluated without overflow for large `|z|`.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
