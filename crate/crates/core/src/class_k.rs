//! Extended class-K-infinity functions: strictly increasing on all of R with
//! `alpha(0) = 0`.

use crate::error::{Error, Result};

/// Closed family of parametric shaping functions used for `alpha` in barrier
/// conditions and for `gamma` in Lyapunov conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedClassKInf {
    /// `c r`
    Linear(f64),
    /// `c r^3`
    Cubic(f64),
    /// `c1 tanh(r) + c2 r`
    TanhLinear(f64, f64),
}

impl ExtendedClassKInf {
    pub fn linear(c: f64) -> Result<Self> {
        positive("linear gain", c)?;
        Ok(Self::Linear(c))
    }

    pub fn cubic(c: f64) -> Result<Self> {
        positive("cubic gain", c)?;
        Ok(Self::Cubic(c))
    }

    pub fn tanh_linear(c1: f64, c2: f64) -> Result<Self> {
        positive("tanh gain", c1)?;
        positive("linear gain", c2)?;
        Ok(Self::TanhLinear(c1, c2))
    }

    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Self::Linear(c) => c * r,
            Self::Cubic(c) => c * r * r * r,
            Self::TanhLinear(c1, c2) => c1 * r.tanh() + c2 * r,
        }
    }

    /// Derivative `alpha'(r)`.
    pub fn slope(&self, r: f64) -> f64 {
        match *self {
            Self::Linear(c) => c,
            Self::Cubic(c) => 3.0 * c * r * r,
            Self::TanhLinear(c1, c2) => {
                let t = r.tanh();
                c1 * (1.0 - t * t) + c2
            }
        }
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn family() -> Vec<ExtendedClassKInf> {
        vec![
            ExtendedClassKInf::linear(1.0).unwrap(),
            ExtendedClassKInf::linear(0.05).unwrap(),
            ExtendedClassKInf::cubic(2.0).unwrap(),
            ExtendedClassKInf::tanh_linear(3.0, 0.1).unwrap(),
        ]
    }

    #[test]
    fn zero_at_origin() {
        for a in family() {
            assert_eq!(a.eval(0.0), 0.0);
            assert_eq!(a.eval(-0.0), 0.0);
        }
    }

    #[test]
    fn strictly_increasing_on_grid() {
        for a in family() {
            let grid: Vec<f64> = (0..1001).map(|i| -10.0 + 20.0 * i as f64 / 1000.0).collect();
            for w in grid.windows(2) {
                assert!(a.eval(w[0]) < a.eval(w[1]), "{a:?} at {}", w[0]);
            }
        }
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        assert!(ExtendedClassKInf::linear(0.0).is_err());
        assert!(ExtendedClassKInf::cubic(-1.0).is_err());
        assert!(ExtendedClassKInf::tanh_linear(1.0, f64::NAN).is_err());
    }

    #[test]
    fn slope_matches_difference_quotient() {
        for a in family() {
            for r in [-2.0, -0.3, 0.0, 0.7, 4.0] {
                let h = 1e-6;
                let fd = (a.eval(r + h) - a.eval(r - h)) / (2.0 * h);
                assert!((fd - a.slope(r)).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_for_random_pairs(
            c1 in 0.01f64..10.0, c2 in 0.01f64..10.0,
            r1 in -10.0f64..10.0, gap in 1e-6f64..5.0,
        ) {
            for a in [
                ExtendedClassKInf::Linear(c1),
                ExtendedClassKInf::Cubic(c1),
                ExtendedClassKInf::TanhLinear(c1, c2),
            ] {
                let r2 = r1 + gap;
                // cubic is flat near zero; compare only where representable
                if matches!(a, ExtendedClassKInf::Cubic(_)) && r1.abs() < 1e-3 && r2.abs() < 1e-3 {
                    continue;
                }
                prop_assert!(a.eval(r1) < a.eval(r2));
            }
        }
    }
}
