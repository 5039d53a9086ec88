//! Pointwise controller synthesis from certificates: membership in the
//! stabilizing / safe input sets, the min-norm CLF controller, the CBF-QP
//! safety filter and the unified CLF-CBF quadratic program.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::certificate::{BarrierSpec, LyapunovSpec};
use crate::error::{Error, Result};
use crate::qp::{solve_active_set, solve_minnorm_single, QpProblem, QpStatus};
use crate::system::{lie_derivatives, Bound, ControlAffineSystem, MatrixField, VectorField};

/// Tolerance for set-membership sign tests and row activity.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

pub const DEFAULT_P_RELAX: f64 = 100.0;

/// Affine input constraint `a . u >= b_rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub a: DVector<f64>,
    pub b_rhs: f64,
}

impl ConstraintRow {
    pub fn slack(&self, u: &DVector<f64>) -> f64 {
        self.a.dot(u) - self.b_rhs
    }

    pub fn is_satisfied(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.slack(u) >= -tol
    }

    pub fn is_active(&self, u: &DVector<f64>) -> bool {
        self.slack(u).abs() <= MEMBERSHIP_TOL * self.b_rhs.abs().max(1.0)
    }
}

/// A safety certificate that yields one affine input constraint per state.
/// Implemented by plain barriers here and by exponential barriers in
/// [`crate::ecbf`].
pub trait SafetyConstraint: Send + Sync {
    /// Barrier value `h(x)`; the safe set is `{h >= 0}`.
    fn value(&self, x: &DVector<f64>) -> f64;
    fn constraint_row(&self, sys: &ControlAffineSystem, x: &DVector<f64>) -> Result<ConstraintRow>;
}

impl SafetyConstraint for BarrierSpec {
    fn value(&self, x: &DVector<f64>) -> f64 {
        BarrierSpec::value(self, x)
    }

    fn constraint_row(&self, sys: &ControlAffineSystem, x: &DVector<f64>) -> Result<ConstraintRow> {
        let (a, b_rhs) = cbf_constraint_row(sys, self, x)?;
        Ok(ConstraintRow { a, b_rhs })
    }
}

/// `a = L_g h(x)`, `b_rhs = -L_f h(x) - alpha(h(x))`; `a . u >= b_rhs` is
/// exactly membership in `K_cbf(x)`.
pub fn cbf_constraint_row(
    sys: &ControlAffineSystem,
    barrier: &BarrierSpec,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let (lf, lg) = lie_derivatives(sys, &barrier.gradient(x), x)?;
    let h = barrier.value(x);
    Ok((lg, -lf - barrier.alpha.eval(h)))
}

/// CLF decrease condition `L_f V + L_g V u <= -gamma(V)/eps` rewritten as
/// `(-L_g V) . u >= L_f V + gamma(V)/eps`.
pub fn clf_constraint_row(
    sys: &ControlAffineSystem,
    lyapunov: &LyapunovSpec,
    x: &DVector<f64>,
) -> Result<ConstraintRow> {
    let (lf, lg) = lie_derivatives(sys, &lyapunov.gradient(x), x)?;
    Ok(ConstraintRow {
        a: -lg,
        b_rhs: lf + lyapunov.decay(x),
    })
}

pub fn in_k_cbf(sys: &ControlAffineSystem, barrier: &BarrierSpec, x: &DVector<f64>, u: &DVector<f64>) -> bool {
    match cbf_constraint_row(sys, barrier, x) {
        Ok((a, b)) => a.len() == u.len() && a.dot(u) - b >= -MEMBERSHIP_TOL,
        Err(_) => false,
    }
}

pub fn in_k_clf(sys: &ControlAffineSystem, lyapunov: &LyapunovSpec, x: &DVector<f64>, u: &DVector<f64>) -> bool {
    match clf_constraint_row(sys, lyapunov, x) {
        Ok(row) => row.a.len() == u.len() && row.is_satisfied(u, MEMBERSHIP_TOL),
        Err(_) => false,
    }
}

/// Pointwise min-norm input satisfying the CLF decrease condition.
pub fn min_norm_clf(sys: &ControlAffineSystem, lyapunov: &LyapunovSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    let row = clf_constraint_row(sys, lyapunov, x)?;
    solve_minnorm_single(&DVector::zeros(sys.m()), &row.a, row.b_rhs).map_err(|e| match e {
        Error::InfeasiblePointwise { .. } => Error::NotAClfHere {
            state: x.iter().copied().collect(),
        },
        other => other,
    })
}

/// Which solver produced the filtered input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterPath {
    /// Nominal input already admissible; returned untouched.
    Passthrough,
    /// Single row, unconstrained inputs: half-space projection.
    ClosedForm,
    ActiveSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDiagnostics {
    pub u_des: DVector<f64>,
    pub nominal_safe: bool,
    pub rows_active: Vec<bool>,
    pub perturbation_norm: f64,
    pub path: FilterPath,
    pub qp_status: Option<QpStatus>,
    pub active_set: Vec<usize>,
}

/// Minimally invasive safety filter (ASIF): projects a nominal feedback
/// `k(x)` onto the safe input set of every attached constraint, respecting
/// the plant's input box when one is declared.
#[derive(Clone)]
pub struct SafetyFilter {
    pub sys: ControlAffineSystem,
    constraints: Vec<Arc<dyn SafetyConstraint>>,
    nominal: VectorField,
}

impl fmt::Debug for SafetyFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SafetyFilter")
            .field("sys", &self.sys)
            .field("constraints", &self.constraints.len())
            .finish_non_exhaustive()
    }
}

impl SafetyFilter {
    pub fn new<K>(sys: ControlAffineSystem, barrier: BarrierSpec, nominal: K) -> Self
    where
        K: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::from_constraints(sys, vec![Arc::new(barrier)], Arc::new(nominal))
    }

    pub fn from_constraints(
        sys: ControlAffineSystem,
        constraints: Vec<Arc<dyn SafetyConstraint>>,
        nominal: VectorField,
    ) -> Self {
        Self {
            sys,
            constraints,
            nominal,
        }
    }

    pub fn with_constraint(mut self, c: Arc<dyn SafetyConstraint>) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn constraints(&self) -> &[Arc<dyn SafetyConstraint>] {
        &self.constraints
    }

    pub fn nominal(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.nominal)(x)
    }

    pub fn filter(&self, x: &DVector<f64>) -> Result<(DVector<f64>, FilterDiagnostics)> {
        let m = self.sys.m();
        let u_des = self.nominal(x);
        if u_des.len() != m {
            return Err(Error::DimensionMismatch {
                context: "nominal controller output",
                expected: m,
                got: u_des.len(),
            });
        }
        crate::system::check_finite("nominal controller output", u_des.iter())?;
        let rows = self
            .constraints
            .iter()
            .map(|c| c.constraint_row(&self.sys, x))
            .collect::<Result<Vec<_>>>()?;
        let nominal_safe =
            rows.iter().all(|r| r.slack(&u_des) >= 0.0) && self.sys.input_admissible(&u_des, 0.0);

        let (u, path, qp_status, active_set) = if nominal_safe {
            (u_des.clone(), FilterPath::Passthrough, None, Vec::new())
        } else if self.sys.input_box().is_none() && rows.len() == 1 {
            let u = solve_minnorm_single(&u_des, &rows[0].a, rows[0].b_rhs)
                .map_err(|e| with_state(e, x))?;
            (u, FilterPath::ClosedForm, None, vec![0])
        } else {
            let (a, b) = stack_rows(&rows, m, 0);
            let mut p = QpProblem::new(DMatrix::identity(m, m), -&u_des).with_constraints(a, b);
            if let Some(bx) = self.sys.input_box() {
                p = p.with_bounds(bx.to_vec());
            }
            let sol = solve_active_set(&p)?;
            if !sol.is_optimal() {
                return Err(infeasible(x, format!("safety filter QP {}", sol.status.as_str())));
            }
            (sol.z_star, FilterPath::ActiveSet, Some(sol.status), sol.active_set)
        };
        let diagnostics = FilterDiagnostics {
            nominal_safe,
            rows_active: rows.iter().map(|r| r.is_active(&u)).collect(),
            perturbation_norm: (&u - &u_des).norm(),
            path,
            qp_status,
            active_set,
            u_des,
        };
        Ok((u, diagnostics))
    }
}

/// Free-function form of [`SafetyFilter::filter`].
pub fn safety_filter(filt: &SafetyFilter, x: &DVector<f64>) -> Result<(DVector<f64>, FilterDiagnostics)> {
    filt.filter(x)
}

fn infeasible(x: &DVector<f64>, detail: String) -> Error {
    Error::InfeasiblePointwise {
        state: x.iter().copied().collect(),
        detail,
    }
}

fn with_state(e: Error, x: &DVector<f64>) -> Error {
    match e {
        Error::InfeasiblePointwise { detail, .. } => infeasible(x, detail),
        other => other,
    }
}

/// Stack rows into `(A, b)` padded with `extra` zero columns.
fn stack_rows(rows: &[ConstraintRow], m: usize, extra: usize) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(rows.len(), m + extra, |i, j| if j < m { rows[i].a[j] } else { 0.0 });
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.b_rhs));
    (a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedOutput {
    pub u: DVector<f64>,
    pub delta: f64,
    pub clf_row: ConstraintRow,
    pub barrier_rows: Vec<ConstraintRow>,
    pub barrier_rows_active: Vec<bool>,
    pub qp_status: QpStatus,
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
}

/// CLF-CBF quadratic program over `(u, delta)`:
///
/// ```text
///   min  1/2 u' H(x) u + p delta^2
///   s.t. L_f V + L_g V u <= -gamma(V)/eps + delta
///        L_f h + L_g h u >= -alpha(h)       (every barrier; never relaxed)
/// ```
#[derive(Clone)]
pub struct UnifiedController {
    pub sys: ControlAffineSystem,
    pub lyapunov: LyapunovSpec,
    constraints: Vec<Arc<dyn SafetyConstraint>>,
    h_cost: Option<MatrixField>,
    pub p_relax: f64,
}

impl fmt::Debug for UnifiedController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UnifiedController")
            .field("sys", &self.sys)
            .field("lyapunov", &self.lyapunov)
            .field("constraints", &self.constraints.len())
            .field("p_relax", &self.p_relax)
            .finish_non_exhaustive()
    }
}

impl UnifiedController {
    pub fn new(sys: ControlAffineSystem, lyapunov: LyapunovSpec, barrier: BarrierSpec) -> Self {
        Self::from_constraints(sys, lyapunov, vec![Arc::new(barrier)])
    }

    /// CLF-only program when `constraints` is empty.
    pub fn from_constraints(
        sys: ControlAffineSystem,
        lyapunov: LyapunovSpec,
        constraints: Vec<Arc<dyn SafetyConstraint>>,
    ) -> Self {
        Self {
            sys,
            lyapunov,
            constraints,
            h_cost: None,
            p_relax: DEFAULT_P_RELAX,
        }
    }

    pub fn with_cost<H>(mut self, h_cost: H) -> Self
    where
        H: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.h_cost = Some(Arc::new(h_cost));
        self
    }

    pub fn with_p_relax(mut self, p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::InvalidArgument(format!("p_relax must be positive, got {p}")));
        }
        self.p_relax = p;
        Ok(self)
    }

    pub fn constraints(&self) -> &[Arc<dyn SafetyConstraint>] {
        &self.constraints
    }

    /// Same program without barrier rows (stability objective only).
    pub fn without_constraints(&self) -> Self {
        let mut s = self.clone();
        s.constraints.clear();
        s
    }

    pub fn cost_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.h_cost {
            Some(h) => h(x),
            None => DMatrix::identity(self.sys.m(), self.sys.m()),
        }
    }

    pub fn solve(&self, x: &DVector<f64>) -> Result<UnifiedOutput> {
        let m = self.sys.m();
        let clf_row = clf_constraint_row(&self.sys, &self.lyapunov, x)?;
        let barrier_rows = self
            .constraints
            .iter()
            .map(|c| c.constraint_row(&self.sys, x))
            .collect::<Result<Vec<_>>>()?;

        let hu = self.cost_matrix(x);
        if hu.nrows() != m || hu.ncols() != m {
            return Err(Error::DimensionMismatch {
                context: "cost matrix H(x)",
                expected: m * m,
                got: hu.nrows() * hu.ncols(),
            });
        }
        let mut h = DMatrix::zeros(m + 1, m + 1);
        h.view_mut((0, 0), (m, m)).copy_from(&hu);
        // p delta^2 = 1/2 (2p) delta^2
        h[(m, m)] = 2.0 * self.p_relax;

        let k = 1 + barrier_rows.len();
        let mut a = DMatrix::zeros(k, m + 1);
        let mut b = DVector::zeros(k);
        for j in 0..m {
            a[(0, j)] = clf_row.a[j];
        }
        a[(0, m)] = 1.0;
        b[0] = clf_row.b_rhs;
        for (i, r) in barrier_rows.iter().enumerate() {
            for j in 0..m {
                a[(i + 1, j)] = r.a[j];
            }
            b[i + 1] = r.b_rhs;
        }
        let mut p = QpProblem::new(h, DVector::zeros(m + 1)).with_constraints(a, b);
        if let Some(bx) = self.sys.input_box() {
            let mut bounds = bx.to_vec();
            bounds.push(Bound::unbounded());
            p = p.with_bounds(bounds);
        }
        let sol = solve_active_set(&p)?;
        if !sol.is_optimal() {
            return Err(infeasible(
                x,
                format!("CLF-CBF QP {} (barrier rows cannot be met)", sol.status.as_str()),
            ));
        }
        let u = sol.z_star.rows(0, m).into_owned();
        let delta = sol.z_star[m];
        Ok(UnifiedOutput {
            barrier_rows_active: barrier_rows.iter().map(|r| r.is_active(&u)).collect(),
            u,
            delta,
            clf_row,
            barrier_rows,
            qp_status: sol.status,
            active_set: sol.active_set,
            kkt_residual: sol.kkt_residual,
        })
    }
}

/// Free-function form of [`UnifiedController::solve`]: `(u, delta, diagnostics)`.
pub fn clf_cbf_qp(ctrl: &UnifiedController, x: &DVector<f64>) -> Result<(DVector<f64>, f64, UnifiedOutput)> {
    let out = ctrl.solve(x)?;
    Ok((out.u.clone(), out.delta, out))
}
