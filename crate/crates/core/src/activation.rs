//! Leaky ReLU and its exact inverse.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Default negative slope.
pub const DEFAULT_SLOPE: f64 = 0.5;

/// Leaky ReLU `y = x` for `x ≥ 0`, `y = slope·x` otherwise.
///
/// A slope of zero (plain ReLU) may be constructed for forward passes but
/// cannot be inverted, so no latent solve accepts it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activation {
    negative_slope: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Self {
            negative_slope: DEFAULT_SLOPE,
        }
    }
}

impl Activation {
    pub fn new(negative_slope: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&negative_slope) {
            return Err(Error::Config(format!(
                "negative slope must lie in [0, 1], got {negative_slope}"
            )));
        }
        Ok(Self { negative_slope })
    }

    pub fn negative_slope(&self) -> f64 {
        self.negative_slope
    }

    pub fn is_invertible(&self) -> bool {
        self.negative_slope > 0.0
    }

    pub fn check_invertible(&self) -> Result<()> {
        if self.is_invertible() {
            Ok(())
        } else {
            Err(Error::NonInvertibleActivation(self.negative_slope))
        }
    }

    #[inline]
    pub fn apply_scalar(&self, x: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            self.negative_slope * x
        }
    }

    /// Inverse of [`apply_scalar`](Self::apply_scalar). Only meaningful for
    /// an invertible activation.
    #[inline]
    pub fn invert_scalar(&self, y: f64) -> f64 {
        if y >= 0.0 {
            y
        } else {
            y / self.negative_slope
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply_scalar(v))
    }

    pub fn invert(&self, y: &Matrix) -> Result<Matrix> {
        self.check_invertible()?;
        Ok(y.map(|v| self.invert_scalar(v)))
    }

    pub(crate) fn apply_in_place(&self, xs: &mut [f64]) {
        for x in xs {
            *x = self.apply_scalar(*x);
        }
    }

    pub(crate) fn invert_in_place(&self, ys: &mut [f64]) {
        for y in ys {
            *y = self.invert_scalar(*y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn branches() {
        let a = Activation::new(0.5).unwrap();
        assert_eq!(a.apply_scalar(2.0), 2.0);
        assert_eq!(a.apply_scalar(-2.0), -1.0);
        assert_eq!(a.invert_scalar(-1.0), -2.0);
        assert_eq!(a.invert_scalar(3.0), 3.0);
    }

    #[test]
    fn unit_slope_is_identity() {
        let a = Activation::new(1.0).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| (i as f64 - 1.3) * (j as f64 + 0.7));
        assert_eq!(a.apply(&x), x);
        assert_eq!(a.invert(&x).unwrap(), x);
    }

    #[test]
    fn relu_is_not_invertible() {
        let relu = Activation::new(0.0).unwrap();
        assert_eq!(relu.apply_scalar(-3.0), 0.0);
        assert!(matches!(
            relu.invert(&Matrix::zeros(1, 1)),
            Err(Error::NonInvertibleActivation(s)) if s == 0.0
        ));
    }

    #[test]
    fn rejects_out_of_range_slope() {
        assert!(Activation::new(-0.1).is_err());
        assert!(Activation::new(1.5).is_err());
        assert!(Activation::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_one_ulp(y in -1e6f64..1e6, slope in 1e-3f64..=1.0) {
            let a = Activation::new(slope).unwrap();
            let back = a.apply_scalar(a.invert_scalar(y));
            if y >= 0.0 {
                prop_assert_eq!(back, y);
            } else {
                let ulp = f64::EPSILON * y.abs();
                prop_assert!((back - y).abs() <= ulp, "{} vs {}", back, y);
            }
        }

        #[test]
        fn strictly_monotone(x1 in -1e6f64..1e6, dx in 1e-6f64..1e3, slope in 1e-3f64..=1.0) {
            let a = Activation::new(slope).unwrap();
            let x2 = x1 + dx;
            prop_assert!(a.apply_scalar(x1) < a.apply_scalar(x2));
        }
    }
}
