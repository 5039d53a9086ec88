//! Small dense quadratic programs.
//!
//! Solves
//!
//! ```text
//!   min  1/2 z' H z + c' z
//!   s.t. a_i' z >= b_i        (i = 0..k)
//!        lo_j <= z_j <= hi_j  (optional box)
//! ```
//!
//! by exhaustive active-set enumeration. Problems are tiny by contract
//! (`d <= 8` decision variables, `k <= 8` explicit rows), so every
//! candidate working set can be tried: for each subset `S` of linearly
//! independent rows the equality-constrained KKT system is solved through
//! the Schur complement `A_S H^-1 A_S'` and the first candidate that is
//! primal feasible with nonnegative multipliers is returned. Because `H` is
//! positive definite the KKT point is unique, so the first hit is the
//! optimum. Subsets are visited by size, then in lexicographic order.

use itertools::Itertools;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::system::Bound;

pub const MAX_DIM: usize = 8;
pub const MAX_ROWS: usize = 8;

const SYMMETRY_TOL: f64 = 1e-12;
const PRIMAL_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-10;
const ZERO_ROW_NORM: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    /// `k x d`, one constraint per row: `a_i' z >= b_i`.
    pub ineq_a: DMatrix<f64>,
    pub ineq_b: DVector<f64>,
    pub bounds: Option<Vec<Bound>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Degenerate,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Optimal => "optimal",
            Self::Infeasible => "infeasible",
            Self::Degenerate => "degenerate",
        }
    }
}

/// Solver output. Row indices in `active_set` and `duals` refer to the
/// compiled row list: the `k` explicit rows first, then for each boxed
/// coordinate its finite lower bound followed by its finite upper bound.
///
/// For non-optimal statuses `z_star` is filled with NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z_star: DVector<f64>,
    pub active_set: Vec<usize>,
    pub duals: DVector<f64>,
    /// Scaled KKT residual: worst of stationarity, primal infeasibility,
    /// complementarity and dual infeasibility, each normalised by the
    /// magnitude of the terms involved (floored at 1).
    pub kkt_residual: f64,
    pub status: QpStatus,
    /// Largest Schur-complement condition estimate among rejected working
    /// sets; reported for `Degenerate`.
    pub condition_estimate: Option<f64>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, c: DVector<f64>) -> Self {
        let d = c.len();
        Self {
            h,
            c,
            ineq_a: DMatrix::zeros(0, d),
            ineq_b: DVector::zeros(0),
            bounds: None,
        }
    }

    pub fn with_constraints(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.ineq_a = a;
        self.ineq_b = b;
        self
    }

    pub fn with_bounds(mut self, bounds: Vec<Bound>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.c.dot(z)
    }

    /// Checks shapes, the size contract, symmetry of `H` and positive
    /// definiteness (via Cholesky).
    pub fn validate(&self) -> Result<Cholesky<f64, Dyn>> {
        let d = self.dim();
        let bad = |m: String| Err(Error::InvalidProblem(m));
        if d == 0 || d > MAX_DIM {
            return bad(format!("decision dimension {d} outside 1..={MAX_DIM}"));
        }
        if self.h.nrows() != d || self.h.ncols() != d {
            return bad(format!("H is {}x{}, expected {d}x{d}", self.h.nrows(), self.h.ncols()));
        }
        let k = self.ineq_b.len();
        if k > MAX_ROWS {
            return bad(format!("{k} constraint rows exceed the limit of {MAX_ROWS}"));
        }
        if self.ineq_a.nrows() != k || self.ineq_a.ncols() != d {
            return bad(format!(
                "constraint matrix is {}x{}, expected {k}x{d}",
                self.ineq_a.nrows(),
                self.ineq_a.ncols()
            ));
        }
        if let Some(b) = &self.bounds {
            if b.len() != d {
                return bad(format!("{} bounds for {d} variables", b.len()));
            }
            if b.iter().any(|b| b.lower > b.upper || b.lower.is_nan() || b.upper.is_nan()) {
                return bad("box bound with lower > upper".into());
            }
        }
        let all_finite = self.h.iter().chain(self.c.iter()).chain(self.ineq_a.iter()).chain(self.ineq_b.iter()).all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite problem data".into());
        }
        let scale = self.h.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return bad(format!("H not symmetric at ({i}, {j})"));
                }
            }
        }
        match Cholesky::new(self.h.clone()) {
            Some(ch) => Ok(ch),
            None => bad("H is not positive definite".into()),
        }
    }

    /// Explicit rows followed by finite box bounds, as `(A, b)` with rows
    /// `a_i' z >= b_i`.
    pub fn compiled_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let mut rows: Vec<(DVector<f64>, f64)> = (0..self.ineq_b.len())
            .map(|i| (self.ineq_a.row(i).transpose(), self.ineq_b[i]))
            .collect();
        if let Some(bounds) = &self.bounds {
            for (j, b) in bounds.iter().enumerate() {
                if b.lower.is_finite() {
                    let mut e = DVector::zeros(d);
                    e[j] = 1.0;
                    rows.push((e, b.lower));
                }
                if b.upper.is_finite() {
                    let mut e = DVector::zeros(d);
                    e[j] = -1.0;
                    rows.push((e, -b.upper));
                }
            }
        }
        let a = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].0[j]);
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        (a, b)
    }
}

/// Closed-form solution of `min 1/2 |u - nominal|^2  s.t.  a' u >= b_rhs`.
///
/// Returns `nominal` unchanged (bitwise) when it already satisfies the
/// constraint, otherwise its projection onto the half-space boundary.
pub fn solve_minnorm_single(
    nominal: &DVector<f64>,
    a: &DVector<f64>,
    b_rhs: f64,
) -> Result<DVector<f64>> {
    if a.len() != nominal.len() {
        return Err(Error::DimensionMismatch {
            context: "min-norm constraint row",
            expected: nominal.len(),
            got: a.len(),
        });
    }
    let slack = a.dot(nominal) - b_rhs;
    if slack >= 0.0 {
        return Ok(nominal.clone());
    }
    let aa = a.norm_squared();
    if aa.sqrt() <= ZERO_ROW_NORM {
        return Err(Error::InfeasiblePointwise {
            state: Vec::new(),
            detail: format!("constraint row vanishes while violated by {:e}", -slack),
        });
    }
    Ok(nominal + a * (-slack / aa))
}

struct Candidate {
    z: DVector<f64>,
    lambda: DVector<f64>,
}

enum Attempt {
    Found(Candidate),
    Rejected,
    Singular(f64),
}

fn try_working_set(
    chol: &Cholesky<f64, Dyn>,
    hinv_c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    subset: &[usize],
) -> Attempt {
    let d = hinv_c.len();
    let s = subset.len();
    let lambda_s = if s == 0 {
        DVector::zeros(0)
    } else {
        let a_s = DMatrix::from_fn(s, d, |i, j| a[(subset[i], j)]);
        let hinv_at = chol.solve(&a_s.transpose());
        let m = &a_s * &hinv_at;
        let rhs = DVector::from_fn(s, |i, _| b[subset[i]]) + &a_s * hinv_c;
        let Some(mch) = Cholesky::new(m) else {
            return Attempt::Singular(f64::INFINITY);
        };
        let diag = mch.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        let cond = (hi / lo).powi(2);
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Attempt::Singular(cond);
        }
        mch.solve(&rhs)
    };
    if lambda_s.iter().any(|l| *l < -DUAL_TOL * lambda_s.amax().max(1.0)) {
        return Attempt::Rejected;
    }
    // z = H^-1 (A_S' lambda - c)
    let mut at_lambda = DVector::zeros(d);
    for (idx, &row) in subset.iter().enumerate() {
        at_lambda += a.row(row).transpose() * lambda_s[idx];
    }
    let z = chol.solve(&at_lambda) - hinv_c;
    for i in 0..b.len() {
        if subset.contains(&i) {
            continue;
        }
        if a.row(i).transpose().dot(&z) < b[i] - PRIMAL_TOL * b[i].abs().max(1.0) {
            return Attempt::Rejected;
        }
    }
    let mut lambda = DVector::zeros(b.len());
    for (idx, &row) in subset.iter().enumerate() {
        lambda[row] = lambda_s[idx].max(0.0);
    }
    Attempt::Found(Candidate { z, lambda })
}

/// Scaled KKT residual of `(z, lambda)` for rows `a_i' z >= b_i`.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let hz = h * z;
    let at_lambda = a.tr_mul(lambda);
    let stat_scale = hz.amax().max(c.amax()).max(at_lambda.amax()).max(1.0);
    let mut worst = (&hz + c - &at_lambda).amax() / stat_scale;
    for i in 0..b.len() {
        let activity = a.row(i).transpose().dot(z) - b[i];
        let scale = b[i].abs().max(1.0);
        worst = worst.max((-activity).max(0.0) / scale);
        worst = worst.max((lambda[i] * activity).abs() / (scale * lambda[i].abs().max(1.0)));
        worst = worst.max((-lambda[i]).max(0.0));
    }
    worst
}

/// Exact active-set enumeration. Returns `Err` only for malformed problems;
/// infeasibility and numerical degeneracy are reported through `status`.
pub fn solve_active_set(p: &QpProblem) -> Result<QpSolution> {
    let chol = p.validate()?;
    let d = p.dim();
    let (raw_a, raw_b) = p.compiled_rows();
    let k = raw_b.len();

    // Row normalisation; vanishing rows are either void or infeasible.
    let mut a = raw_a.clone();
    let mut b = raw_b.clone();
    let mut norms = vec![0.0; k];
    let mut live = Vec::with_capacity(k);
    let nan_solution = |status, condition_estimate| QpSolution {
        z_star: DVector::from_element(d, f64::NAN),
        active_set: Vec::new(),
        duals: DVector::from_element(k, f64::NAN),
        kkt_residual: f64::INFINITY,
        status,
        condition_estimate,
    };
    for i in 0..k {
        let n = raw_a.row(i).norm();
        norms[i] = n;
        if n <= ZERO_ROW_NORM {
            if raw_b[i] > PRIMAL_TOL * raw_b[i].abs().max(1.0) {
                return Ok(nan_solution(QpStatus::Infeasible, None));
            }
            continue;
        }
        a.row_mut(i).scale_mut(1.0 / n);
        b[i] /= n;
        live.push(i);
    }
    // Paired box rows for one coordinate can never be active together.
    let paired: Vec<(usize, usize)> = {
        let mut out = Vec::new();
        let explicit = p.ineq_b.len();
        if let Some(bounds) = &p.bounds {
            let mut idx = explicit;
            for bd in bounds {
                match (bd.lower.is_finite(), bd.upper.is_finite()) {
                    (true, true) => {
                        out.push((idx, idx + 1));
                        idx += 2;
                    }
                    (true, false) | (false, true) => idx += 1,
                    (false, false) => {}
                }
            }
        }
        out
    };

    let hinv_c = chol.solve(&p.c);
    let mut worst_singular: Option<f64> = None;
    let mut found = None;
    'outer: for size in 0..=live.len().min(d) {
        for subset in live.iter().copied().combinations(size) {
            if paired.iter().any(|(l, u)| subset.contains(l) && subset.contains(u)) {
                continue;
            }
            match try_working_set(&chol, &hinv_c, &a, &b, &subset) {
                Attempt::Found(c) => {
                    found = Some((subset, c));
                    break 'outer;
                }
                Attempt::Rejected => {}
                Attempt::Singular(cond) => {
                    worst_singular = Some(worst_singular.map_or(cond, |w: f64| w.max(cond)));
                }
            }
        }
    }

    let Some((subset, cand)) = found else {
        return Ok(match worst_singular {
            Some(cond) => nan_solution(QpStatus::Degenerate, Some(cond)),
            None => nan_solution(QpStatus::Infeasible, None),
        });
    };
    // Undo row scaling on the multipliers.
    let duals = DVector::from_fn(k, |i, _| {
        if norms[i] > ZERO_ROW_NORM {
            cand.lambda[i] / norms[i]
        } else {
            0.0
        }
    });
    let kkt_residual = kkt_residual(&p.h, &p.c, &raw_a, &raw_b, &cand.z, &duals);
    Ok(QpSolution {
        z_star: cand.z,
        active_set: subset,
        duals,
        kkt_residual,
        status: QpStatus::Optimal,
        condition_estimate: worst_singular,
    })
}
