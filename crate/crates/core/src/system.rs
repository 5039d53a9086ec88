//! Control-affine plants `xdot = f(x) + g(x) u` and Lie derivatives of
//! scalar certificates along them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type ScalarField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Closed interval per coordinate. Infinite endpoints are allowed and mean
/// "unbounded on that side".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn symmetric(half_width: f64) -> Self {
        Self::new(-half_width, half_width)
    }

    pub fn unbounded() -> Self {
        Self::new(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lower).min(self.upper)
    }

    pub fn is_finite(&self) -> bool {
        self.lower.is_finite() || self.upper.is_finite()
    }
}

/// A plant `xdot = f(x) + g(x) u` with state dimension `n` and input
/// dimension `m`.
///
/// `domain_box` delimits the domain `D` used for sampling and validation;
/// `input_box` is the admissible input set `U` (absent means `U = R^m`).
#[derive(Clone)]
pub struct ControlAffineSystem {
    n: usize,
    m: usize,
    f: VectorField,
    g: MatrixField,
    domain_box: Option<Vec<Bound>>,
    input_box: Option<Vec<Bound>>,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("domain_box", &self.domain_box)
            .field("input_box", &self.input_box)
            .finish_non_exhaustive()
    }
}

impl ControlAffineSystem {
    pub fn new<F, G>(n: usize, m: usize, f: F, g: G) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            n,
            m,
            f: Arc::new(f),
            g: Arc::new(g),
            domain_box: None,
            input_box: None,
        }
    }

    pub fn with_domain_box(mut self, bounds: Vec<Bound>) -> Self {
        assert_eq!(bounds.len(), self.n, "domain box must have n entries");
        self.domain_box = Some(bounds);
        self
    }

    pub fn with_input_box(mut self, bounds: Vec<Bound>) -> Self {
        assert_eq!(bounds.len(), self.m, "input box must have m entries");
        self.input_box = Some(bounds);
        self
    }

    /// Same plant with `U = R^m`.
    pub fn without_input_box(&self) -> Self {
        let mut s = self.clone();
        s.input_box = None;
        s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn domain_box(&self) -> Option<&[Bound]> {
        self.domain_box.as_deref()
    }

    pub fn input_box(&self) -> Option<&[Bound]> {
        self.input_box.as_deref()
    }

    pub fn in_domain(&self, x: &DVector<f64>) -> bool {
        match &self.domain_box {
            Some(b) => x.iter().zip(b).all(|(v, b)| b.contains(*v)),
            None => true,
        }
    }

    pub fn input_admissible(&self, u: &DVector<f64>, tol: f64) -> bool {
        match &self.input_box {
            Some(b) => u
                .iter()
                .zip(b)
                .all(|(v, b)| *v >= b.lower - tol && *v <= b.upper + tol),
            None => true,
        }
    }

    /// Drift `f(x)`, checked for shape and finiteness.
    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("state", x, self.n)?;
        let fx = (self.f)(x);
        check_len("drift f(x)", &fx, self.n)?;
        check_finite("drift f(x)", fx.iter())?;
        Ok(fx)
    }

    /// Input matrix `g(x)` (n x m), checked for shape and finiteness.
    pub fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len("state", x, self.n)?;
        let gx = (self.g)(x);
        if gx.nrows() != self.n || gx.ncols() != self.m {
            return Err(Error::DimensionMismatch {
                context: "input matrix g(x)",
                expected: self.n * self.m,
                got: gx.nrows() * gx.ncols(),
            });
        }
        check_finite("input matrix g(x)", gx.iter())?;
        Ok(gx)
    }

    /// `f(x) + g(x) u`.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("input", u, self.m)?;
        let mut dx = self.drift(x)?;
        dx.gemv(1.0, &self.input_matrix(x)?, u, 1.0);
        Ok(dx)
    }
}

fn check_len(context: &'static str, v: &DVector<f64>, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_finite<'a>(
    context: &'static str,
    values: impl Iterator<Item = &'a f64>,
) -> Result<()> {
    for (coordinate, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(Error::NumericalFailure {
                context,
                coordinate,
            });
        }
    }
    Ok(())
}

/// Lie derivatives of a scalar function with gradient `grad` at `x`:
/// `L_f = grad . f(x)` and `L_g = g(x)^T grad`.
pub fn lie_derivatives(
    sys: &ControlAffineSystem,
    grad: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_len("gradient", grad, sys.n())?;
    check_finite("gradient", grad.iter())?;
    let fx = sys.drift(x)?;
    let gx = sys.input_matrix(x)?;
    let lf = grad.dot(&fx);
    let lg = gx.tr_mul(grad);
    if !lf.is_finite() {
        return Err(Error::NumericalFailure {
            context: "L_f",
            coordinate: 0,
        });
    }
    check_finite("L_g", lg.iter())?;
    Ok((lf, lg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_integrator() -> ControlAffineSystem {
        ControlAffineSystem::new(
            1,
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::from_element(1, 1, 1.0),
        )
    }

    fn double_integrator() -> ControlAffineSystem {
        ControlAffineSystem::new(
            2,
            1,
            |x| DVector::from_vec(vec![x[1], 0.0]),
            |_| DMatrix::from_vec(2, 1, vec![0.0, 1.0]),
        )
    }

    #[test]
    fn zero_drift_lie_derivatives() {
        let sys = single_integrator();
        for x in [-3.0, 0.0, 7.5] {
            let (lf, lg) =
                lie_derivatives(&sys, &DVector::from_vec(vec![-1.0]), &DVector::from_vec(vec![x]))
                    .unwrap();
            assert_eq!(lf, 0.0);
            assert_eq!(lg.as_slice(), &[-1.0]);
        }
    }

    #[test]
    fn double_integrator_chain_rule() {
        let (lf, lg) = lie_derivatives(
            &double_integrator(),
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::from_vec(vec![0.0, 3.0]),
        )
        .unwrap();
        assert_eq!(lf, 3.0);
        assert_eq!(lg.as_slice(), &[0.0]);
    }

    // Random cubic polynomial plant in 3 states / 2 inputs.
    fn polynomial_plant(coeffs: Vec<f64>) -> ControlAffineSystem {
        let cf = coeffs.clone();
        ControlAffineSystem::new(
            3,
            2,
            move |x| {
                DVector::from_fn(3, |i, _| {
                    cf[3 * i] * x[0] * x[1] + cf[3 * i + 1] * x[2].powi(3) + cf[3 * i + 2]
                })
            },
            move |x| {
                DMatrix::from_fn(3, 2, |i, j| {
                    coeffs[9 + 2 * i + j] * (1.0 + x[i] * x[(i + j) % 3])
                })
            },
        )
    }

    #[test]
    fn matches_dense_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coeffs: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sys = polynomial_plant(coeffs);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
            let grad = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let (lf, lg) = lie_derivatives(&sys, &grad, &x).unwrap();

            // explicit index loops, independent of nalgebra's products
            let fx = sys.drift(&x).unwrap();
            let gx = sys.input_matrix(&x).unwrap();
            let mut lf_ref = 0.0;
            for i in 0..3 {
                lf_ref += grad[i] * fx[i];
            }
            assert!((lf - lf_ref).abs() <= 1e-12 * (1.0 + lf_ref.abs()));
            for j in 0..2 {
                let mut s = 0.0;
                for i in 0..3 {
                    s += gx[(i, j)] * grad[i];
                }
                assert!((lg[j] - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn bilinear_in_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coeffs: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sys = polynomial_plant(coeffs);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let grad = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let (lf1, lg1) = lie_derivatives(&sys, &grad, &x).unwrap();
            let (lf2, lg2) = lie_derivatives(&sys, &(&grad * 2.0), &x).unwrap();
            assert!((lf2 - 2.0 * lf1).abs() < 1e-12);
            assert!((lg2 - lg1 * 2.0).norm() < 1e-12);
        }
    }

    #[test]
    fn non_finite_drift_reports_coordinate() {
        let sys = ControlAffineSystem::new(
            2,
            1,
            |x| DVector::from_vec(vec![x[0], 1.0 / x[1]]),
            |_| DMatrix::from_vec(2, 1, vec![0.0, 1.0]),
        );
        let err = lie_derivatives(
            &sys,
            &DVector::from_vec(vec![1.0, 1.0]),
            &DVector::from_vec(vec![0.0, 0.0]),
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::NumericalFailure {
                context: "drift f(x)",
                coordinate: 1
            }
        );
    }

    #[test]
    fn wrong_gradient_length_is_rejected() {
        let err = lie_derivatives(
            &double_integrator(),
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![0.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
