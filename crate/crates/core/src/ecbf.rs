//! Exponential control barrier functions for barriers of relative degree
//! `r >= 1`: companion-form embedding of the derivative chain, pole
//! placement, the nested `nu` chain and the CLF-ECBF quadratic program.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::certificate::LyapunovSpec;
use crate::error::{Error, Result};
use crate::filters::{ConstraintRow, SafetyConstraint, UnifiedController, UnifiedOutput};
use crate::system::{ControlAffineSystem, ScalarField, VectorField};

/// Analytic Lie-derivative chain of a barrier: `L_f^k h` for `k = 0..=r` and
/// `L_g L_f^{r-1} h`.
#[derive(Clone)]
pub struct LieChain {
    lf_powers: Vec<ScalarField>,
    lglf: VectorField,
}

impl fmt::Debug for LieChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LieChain").field("r", &self.r()).finish_non_exhaustive()
    }
}

/// One failed chain-consistency probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDeviation {
    pub state: Vec<f64>,
    /// `"lf k"` for `L_f^{k+1} h` vs the flow derivative of `L_f^k h`,
    /// `"lg k"` for `L_g L_f^k h`.
    pub what: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    pub samples: usize,
    pub failures: Vec<ChainDeviation>,
}

impl ChainReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

const CHAIN_STEP: f64 = 1e-5;
const CHAIN_RTOL: f64 = 1e-3;

impl LieChain {
    /// `lf_powers[0]` is `h`; its length is `r + 1`.
    pub fn new(lf_powers: Vec<ScalarField>, lglf: VectorField) -> Result<Self> {
        if lf_powers.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a Lie chain needs L_f^k h for k = 0..=r with r >= 1, got {} entries",
                lf_powers.len()
            )));
        }
        Ok(Self { lf_powers, lglf })
    }

    pub fn r(&self) -> usize {
        self.lf_powers.len() - 1
    }

    pub fn h(&self, x: &DVector<f64>) -> f64 {
        (self.lf_powers[0])(x)
    }

    pub fn lf_power(&self, k: usize, x: &DVector<f64>) -> f64 {
        (self.lf_powers[k])(x)
    }

    pub fn lglf(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.lglf)(x)
    }

    /// Numerically verify the chain on `samples`: each `L_f^{k+1} h` against
    /// the central difference of `L_f^k h` along `f` (step `1e-5`), every
    /// `L_g L_f^k h` with `k < r - 1` against zero and `L_g L_f^{r-1} h`
    /// against differences along the columns of `g`. Relative tolerance `1e-3`.
    pub fn check_consistency(&self, sys: &ControlAffineSystem, samples: &[DVector<f64>]) -> Result<ChainReport> {
        let r = self.r();
        let mut failures = Vec::new();
        for x in samples {
            let fx = sys.drift(x)?;
            let gx = sys.input_matrix(x)?;
            for k in 0..r {
                let field = &self.lf_powers[k];
                let along = |d: &DVector<f64>| {
                    let s = CHAIN_STEP / d.norm().max(1.0);
                    (field(&(x + d * s)) - field(&(x - d * s))) / (2.0 * s)
                };
                let numeric = along(&fx);
                let analytic = self.lf_power(k + 1, x);
                if !close(analytic, numeric) {
                    failures.push(ChainDeviation {
                        state: x.iter().copied().collect(),
                        what: format!("lf {k}"),
                        analytic: vec![analytic],
                        numeric: vec![numeric],
                    });
                }
                let lg_num: Vec<f64> = (0..sys.m()).map(|j| along(&gx.column(j).into_owned())).collect();
                let lg_ana: Vec<f64> = if k + 1 == r {
                    self.lglf(x).iter().copied().collect()
                } else {
                    vec![0.0; sys.m()]
                };
                if lg_ana.len() != lg_num.len() || lg_ana.iter().zip(&lg_num).any(|(a, n)| !close(*a, *n)) {
                    failures.push(ChainDeviation {
                        state: x.iter().copied().collect(),
                        what: format!("lg {k}"),
                        analytic: lg_ana,
                        numeric: lg_num,
                    });
                }
            }
        }
        Ok(ChainReport {
            samples: samples.len(),
            failures,
        })
    }
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= CHAIN_RTOL * analytic.abs().max(1.0)
}

/// `(F, G, C_out)` of the `r`-th order integrator chain: ones on the
/// superdiagonal of `F`, `G = e_r`, `C_out = e_1^T`.
pub fn companion_matrices(r: usize) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if r == 0 {
        return Err(Error::InvalidArgument("relative degree must be at least 1".into()));
    }
    let f = DMatrix::from_fn(r, r, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
    let mut g = DVector::zeros(r);
    g[r - 1] = 1.0;
    let mut c = DMatrix::zeros(1, r);
    c[(0, 0)] = 1.0;
    Ok((f, g, c))
}

/// Ascending coefficients of `prod_i (s + p_i)`; the last entry is 1.
pub fn pole_polynomial(poles: &[f64]) -> Vec<f64> {
    let mut coeffs = vec![1.0];
    for &p in poles {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (j, c) in coeffs.iter().enumerate() {
            next[j] += p * c;
            next[j + 1] += c;
        }
        coeffs = next;
    }
    coeffs
}

/// Gain row `(alpha_1, .., alpha_r)` with
/// `prod_i (s + p_i) = s^r + alpha_r s^{r-1} + .. + alpha_1`.
pub fn gains_from_poles(poles: &[f64]) -> Result<DVector<f64>> {
    if poles.is_empty() {
        return Err(Error::InvalidArgument("at least one pole is required".into()));
    }
    if poles.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::InvalidPoles(poles.to_vec()));
    }
    let coeffs = pole_polynomial(poles);
    Ok(DVector::from_column_slice(&coeffs[..poles.len()]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialStateVerdict {
    Valid,
    /// First index `i` with `nu_i(x0) < 0`.
    Invalid(usize),
}

/// Pole-placed exponential barrier built on a [`LieChain`].
#[derive(Debug, Clone)]
pub struct EcbfDesign {
    pub chain: LieChain,
    poles: Vec<f64>,
    k_alpha: DVector<f64>,
    f: DMatrix<f64>,
    g: DVector<f64>,
    c_out: DMatrix<f64>,
}

impl EcbfDesign {
    pub fn new(chain: LieChain, poles: Vec<f64>) -> Result<Self> {
        if poles.len() != chain.r() {
            return Err(Error::DimensionMismatch {
                context: "pole count vs relative degree",
                expected: chain.r(),
                got: poles.len(),
            });
        }
        let k_alpha = gains_from_poles(&poles)?;
        let (f, g, c_out) = companion_matrices(chain.r())?;
        Ok(Self {
            chain,
            poles,
            k_alpha,
            f,
            g,
            c_out,
        })
    }

    pub fn r(&self) -> usize {
        self.chain.r()
    }

    pub fn poles(&self) -> &[f64] {
        &self.poles
    }

    pub fn k_alpha(&self) -> &DVector<f64> {
        &self.k_alpha
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn c_out(&self) -> &DMatrix<f64> {
        &self.c_out
    }

    /// Closed-loop matrix `F - G K_alpha`.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.f - &self.g * self.k_alpha.transpose()
    }

    /// Same chain with the poles reordered.
    pub fn with_poles(&self, poles: Vec<f64>) -> Result<Self> {
        Self::new(self.chain.clone(), poles)
    }
}

/// `(h, L_f h, .., L_f^{r-1} h)` at `x`.
pub fn eta_b(chain: &LieChain, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(chain.r(), |k, _| chain.lf_power(k, x))
}

/// `nu_0 .. nu_r` with `nu_0 = h` and `nu_i = d/dt nu_{i-1} + p_i nu_{i-1}`,
/// expanded as a combination of chain entries. `nu_r` is the input-free part.
pub fn nu_chain(design: &EcbfDesign, x: &DVector<f64>) -> DVector<f64> {
    let r = design.r();
    let eta: Vec<f64> = (0..=r).map(|k| design.chain.lf_power(k, x)).collect();
    DVector::from_fn(r + 1, |i, _| {
        pole_polynomial(&design.poles[..i])
            .iter()
            .zip(&eta)
            .map(|(c, e)| c * e)
            .sum()
    })
}

pub fn validate_initial_state(design: &EcbfDesign, x0: &DVector<f64>) -> Result<InitialStateVerdict> {
    let h = design.chain.h(x0);
    if h < 0.0 {
        return Err(Error::OutsideSafeSet { h });
    }
    let nu = nu_chain(design, x0);
    Ok((0..design.r())
        .find(|&i| nu[i] < -1e-12)
        .map_or(InitialStateVerdict::Valid, InitialStateVerdict::Invalid))
}

/// `a = L_g L_f^{r-1} h`, `b_rhs = -L_f^r h - K_alpha . eta_b`.
pub fn ecbf_constraint_row(design: &EcbfDesign, x: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let a = design.chain.lglf(x);
    let norm = a.norm();
    if !(norm > 1e-12) {
        return Err(Error::RelativeDegreeViolation {
            norm,
            state: x.iter().copied().collect(),
        });
    }
    let r = design.r();
    let b = -design.chain.lf_power(r, x) - design.k_alpha.dot(&eta_b(&design.chain, x));
    Ok((a, b))
}

impl SafetyConstraint for EcbfDesign {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.chain.h(x)
    }

    fn constraint_row(&self, _sys: &ControlAffineSystem, x: &DVector<f64>) -> Result<ConstraintRow> {
        let (a, b_rhs) = ecbf_constraint_row(self, x)?;
        Ok(ConstraintRow { a, b_rhs })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcbfOutput {
    pub u: DVector<f64>,
    /// `mu_i = L_f^r h_i + L_g L_f^{r-1} h_i u`, one per design.
    pub mu: Vec<f64>,
    pub delta: f64,
    pub inner: UnifiedOutput,
}

/// CLF-ECBF program. The virtual input `mu` is substituted through its
/// defining equality, leaving a program over `(u, delta)` with one row per
/// design.
#[derive(Debug, Clone)]
pub struct EcbfController {
    designs: Vec<Arc<EcbfDesign>>,
    inner: UnifiedController,
}

impl EcbfController {
    pub fn new(sys: ControlAffineSystem, lyapunov: LyapunovSpec, designs: Vec<Arc<EcbfDesign>>) -> Self {
        let rows = designs.iter().map(|d| d.clone() as Arc<dyn SafetyConstraint>).collect();
        Self {
            inner: UnifiedController::from_constraints(sys, lyapunov, rows),
            designs,
        }
    }

    pub fn with_cost<H>(mut self, h_cost: H) -> Self
    where
        H: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.inner = self.inner.with_cost(h_cost);
        self
    }

    pub fn with_p_relax(mut self, p: f64) -> Result<Self> {
        self.inner = self.inner.with_p_relax(p)?;
        Ok(self)
    }

    pub fn designs(&self) -> &[Arc<EcbfDesign>] {
        &self.designs
    }

    pub fn unified(&self) -> &UnifiedController {
        &self.inner
    }

    pub fn solve(&self, x: &DVector<f64>) -> Result<EcbfOutput> {
        let out = self.inner.solve(x)?;
        let mu = self
            .designs
            .iter()
            .map(|d| d.chain.lf_power(d.r(), x) + d.chain.lglf(x).dot(&out.u))
            .collect();
        Ok(EcbfOutput {
            u: out.u.clone(),
            mu,
            delta: out.delta,
            inner: out,
        })
    }
}

/// Free-function form: `(u, mu, delta)`.
pub fn clf_ecbf_qp(ctrl: &EcbfController, x: &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>, f64)> {
    let out = ctrl.solve(x)?;
    Ok((out.u, out.mu, out.delta))
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = a * scale;
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `C_out exp((F - G K_alpha) t) eta0`: the lower bound on `h(t)` guaranteed
/// by the exponential barrier condition.
pub fn exponential_bound(design: &EcbfDesign, eta0: &DVector<f64>, t: f64) -> f64 {
    let phi = expm(&(design.closed_loop() * t));
    (design.c_out() * phi * eta0)[(0, 0)]
}
