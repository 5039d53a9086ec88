//! Scalar certificate functions (barrier `h`, Lyapunov `V`) with analytic
//! gradients, plus finite-difference self-checks of those gradients.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::class_k::ExtendedClassKInf;
use crate::error::{Error, Result};
use crate::system::{ScalarField, VectorField};

/// Barrier function `h` defining the safe set `C = {h >= 0}`.
#[derive(Clone)]
pub struct BarrierSpec {
    h: ScalarField,
    grad_h: VectorField,
    pub alpha: ExtendedClassKInf,
}

impl fmt::Debug for BarrierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BarrierSpec")
            .field("alpha", &self.alpha)
            .finish_non_exhaustive()
    }
}

impl BarrierSpec {
    pub fn new<H, G>(h: H, grad_h: G, alpha: ExtendedClassKInf) -> Self
    where
        H: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            h: Arc::new(h),
            grad_h: Arc::new(grad_h),
            alpha,
        }
    }

    pub fn from_fields(h: ScalarField, grad_h: VectorField, alpha: ExtendedClassKInf) -> Self {
        Self { h, grad_h, alpha }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.h)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad_h)(x)
    }

    pub fn value_field(&self) -> ScalarField {
        self.h.clone()
    }
}

/// Control Lyapunov function candidate `V` with decay shaping `gamma` and an
/// optional rapidity factor `epsilon` in (0, 1): the decrease condition is
/// `Vdot <= -gamma(V) / epsilon`.
#[derive(Clone)]
pub struct LyapunovSpec {
    v: ScalarField,
    grad_v: VectorField,
    pub gamma: ExtendedClassKInf,
    pub epsilon: Option<f64>,
    pub equilibrium: DVector<f64>,
}

impl fmt::Debug for LyapunovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovSpec")
            .field("gamma", &self.gamma)
            .field("epsilon", &self.epsilon)
            .field("equilibrium", &self.equilibrium.as_slice())
            .finish_non_exhaustive()
    }
}

impl LyapunovSpec {
    pub fn new<V, G>(v: V, grad_v: G, gamma: ExtendedClassKInf, equilibrium: DVector<f64>) -> Self
    where
        V: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            v: Arc::new(v),
            grad_v: Arc::new(grad_v),
            gamma,
            epsilon: None,
            equilibrium,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rapidity factor must lie in (0, 1), got {epsilon}"
            )));
        }
        self.epsilon = Some(epsilon);
        Ok(self)
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.v)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad_v)(x)
    }

    /// Required decay rate `gamma(V(x)) / epsilon`.
    pub fn decay(&self, x: &DVector<f64>) -> f64 {
        self.gamma.eval(self.value(x)) / self.epsilon.unwrap_or(1.0)
    }

    /// `V(x*) = 0` and `V > 0` on every sample away from `x*`.
    pub fn check_positive_definite(&self, samples: &[DVector<f64>]) -> bool {
        if self.value(&self.equilibrium).abs() > 1e-12 {
            return false;
        }
        samples
            .iter()
            .filter(|x| (*x - &self.equilibrium).norm() > 1e-9)
            .all(|x| self.value(x) > 0.0)
    }
}

/// Anything exposing a scalar field with an analytic gradient.
pub trait ScalarCertificate {
    fn eval(&self, x: &DVector<f64>) -> f64;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl ScalarCertificate for BarrierSpec {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.value(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.gradient(x)
    }
}

impl ScalarCertificate for LyapunovSpec {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.value(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.gradient(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDeviation {
    pub state: Vec<f64>,
    pub max_abs_deviation: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub samples: Vec<SampleDeviation>,
    pub pass: bool,
    pub max_deviation: f64,
}

impl GradientReport {
    pub fn failures(&self) -> impl Iterator<Item = &SampleDeviation> {
        self.samples.iter().filter(|s| !s.pass)
    }
}

/// Five-point central difference of `field` at `x` along coordinate `i` with
/// step `1e-4 * max(1, |x_i|)`.
pub fn five_point_partial(field: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, i: usize) -> f64 {
    let step = 1e-4 * x[i].abs().max(1.0);
    let at = |k: f64| {
        let mut y = x.clone();
        y[i] += k * step;
        field(&y)
    };
    (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * step)
}

/// Compare the analytic gradient against five-point central differences at
/// every sample. A sample passes iff its max-abs deviation is at most
/// `max(1e-5, 1e-4 * |grad|)`.
pub fn check_gradient_consistency<C: ScalarCertificate + ?Sized>(
    spec: &C,
    samples: &[DVector<f64>],
) -> GradientReport {
    let field = |y: &DVector<f64>| spec.eval(y);
    let mut out = Vec::with_capacity(samples.len());
    for x in samples {
        let grad = spec.grad(x);
        let max_abs_deviation = (0..x.len())
            .map(|i| (grad[i] - five_point_partial(&field, x, i)).abs())
            .fold(0.0, f64::max);
        let threshold = (1e-4 * grad.norm()).max(1e-5);
        out.push(SampleDeviation {
            state: x.iter().copied().collect(),
            max_abs_deviation,
            threshold,
            // NaN deviations fail
            pass: max_abs_deviation <= threshold,
        });
    }
    GradientReport {
        pass: out.iter().all(|s| s.pass),
        max_deviation: out.iter().map(|s| s.max_abs_deviation).fold(0.0, f64::max),
        samples: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alpha() -> ExtendedClassKInf {
        ExtendedClassKInf::Linear(1.0)
    }

    fn grid() -> Vec<DVector<f64>> {
        let mut out = Vec::new();
        for i in 0..11 {
            for j in 0..11 {
                out.push(DVector::from_vec(vec![
                    -2.0 + 0.4 * i as f64,
                    -2.0 + 0.4 * j as f64,
                ]));
            }
        }
        out
    }

    #[test]
    fn exact_polynomial_gradient_passes() {
        let spec = BarrierSpec::new(
            |x| 1.0 - x[0] * x[0],
            |x| DVector::from_vec(vec![-2.0 * x[0], 0.0]),
            alpha(),
        );
        let report = check_gradient_consistency(&spec, &grid());
        assert!(report.pass);
        assert!(report.max_deviation < 1e-8, "{}", report.max_deviation);
    }

    #[test]
    fn wrong_gradient_fails_with_unit_deviation() {
        let spec = BarrierSpec::new(
            |x| 1.0 - x[0] * x[0],
            |x| DVector::from_vec(vec![-x[0], 0.0]),
            alpha(),
        );
        let report = check_gradient_consistency(&spec, &[DVector::from_vec(vec![1.0, 0.0])]);
        assert!(!report.pass);
        // true partial is -2, claimed -1
        assert!((report.max_deviation - 1.0).abs() < 1e-6);
    }

    #[test]
    fn norm_is_flagged_at_its_kink() {
        let spec = BarrierSpec::new(
            |x| x.norm(),
            |x| {
                let n = x.norm();
                if n > 0.0 {
                    x / n
                } else {
                    DVector::zeros(x.len())
                }
            },
            alpha(),
        );
        let near = DVector::from_vec(vec![1e-6, 0.0]);
        let far = DVector::from_vec(vec![1.0, 1.0]);
        let report = check_gradient_consistency(&spec, &[near, far]);
        assert!(!report.samples[0].pass);
        assert!(report.samples[0].max_abs_deviation > 0.1);
        assert!(report.samples[1].pass);
        assert_eq!(report.failures().count(), 1);
    }

    #[test]
    fn lyapunov_positive_definiteness() {
        let v = LyapunovSpec::new(
            |x| 0.5 * x.norm_squared(),
            |x| x.clone(),
            alpha(),
            DVector::zeros(2),
        );
        assert!(v.check_positive_definite(&grid()));
        let shifted = LyapunovSpec::new(
            |x| 0.5 * (x[0] - 1.0).powi(2),
            |x| DVector::from_vec(vec![x[0] - 1.0, 0.0]),
            alpha(),
            DVector::zeros(2),
        );
        assert!(!shifted.check_positive_definite(&grid()));
    }

    #[test]
    fn epsilon_scales_decay() {
        let v = LyapunovSpec::new(|x| 0.5 * x[0] * x[0], |x| x.clone(), alpha(), DVector::zeros(1));
        let x = DVector::from_vec(vec![1.0]);
        assert_eq!(v.decay(&x), 0.5);
        let fast = v.with_epsilon(0.5).unwrap();
        assert_eq!(fast.decay(&x), 1.0);
        assert!(fast.clone().with_epsilon(1.0).is_err());
    }
}
