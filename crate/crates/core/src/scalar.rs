use nalgebra::RealField;
use num_dual::Dual64;

/// Scalar type the model algebra is written against.
///
/// Plain floats evaluate the model; [`Dual64`] carries one directional
/// derivative through the very same code, which is how exact parameter
/// derivatives of moments and log-likelihoods are obtained.
pub trait Scalar: RealField + Copy {
    /// Real part as `f64` (used for admissibility and conditioning checks).
    fn value(self) -> f64;
    fn lit(v: f64) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
}

impl Scalar for f32 {
    #[inline]
    fn value(self) -> f64 {
        self as f64
    }
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for Dual64 {
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn lit(v: f64) -> Self {
        Dual64::from(v)
    }
}

/// Tangent part of a dual number.
#[inline]
pub fn tangent(d: Dual64) -> f64 {
    d.eps
}

/// Lift a real vector to duals, seeding the tangent on coordinate `seed`.
pub fn seeded(values: &[f64], seed: Option<usize>) -> Vec<Dual64> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = Dual64::from(v);
            if Some(i) == seed {
                d.derivative()
            } else {
                d
            }
        })
        .collect()
}

pub fn lift<T: Scalar>(values: &[f64]) -> Vec<T> {
    values.iter().map(|&v| T::lit(v)).collect()
}

pub fn lower<T: Scalar>(values: &[T]) -> Vec<f64> {
    values.iter().map(|v| v.value()).collect()
}
