//! Barriers induced by a backup controller: `h(x)` is the smallest value of a
//! performance function `rho` along the flow of the backup law `beta` over a
//! finite horizon, with a finite-difference gradient.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::certificate::BarrierSpec;
use crate::class_k::ExtendedClassKInf;
use crate::error::{Error, Result};
use crate::system::{ControlAffineSystem, ScalarField, VectorField};

pub const DEFAULT_FD_STEP: f64 = 1e-4;
const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone)]
pub struct BackupCbf {
    pub sys: ControlAffineSystem,
    rho: ScalarField,
    beta: VectorField,
    horizon: f64,
    flow_dt: f64,
    pub fd_step: f64,
    pub alpha: ExtendedClassKInf,
}

impl fmt::Debug for BackupCbf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackupCbf")
            .field("horizon", &self.horizon)
            .field("flow_dt", &self.flow_dt)
            .field("fd_step", &self.fd_step)
            .field("alpha", &self.alpha)
            .finish_non_exhaustive()
    }
}

/// Result of one barrier evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackupValue {
    pub h: f64,
    /// Flow time at which the minimum of `rho` was attained.
    pub argmin_tau: f64,
    /// Minimum attained at the last grid point: the infimum may lie beyond
    /// the horizon.
    pub at_horizon: bool,
}

impl BackupCbf {
    /// `horizon / flow_dt` must be an integer of at least 10.
    pub fn new<R, B>(
        sys: ControlAffineSystem,
        rho: R,
        beta: B,
        horizon: f64,
        flow_dt: f64,
        alpha: ExtendedClassKInf,
    ) -> Result<Self>
    where
        R: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        B: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if !(horizon > 0.0 && flow_dt > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon and flow step must be positive, got {horizon} and {flow_dt}"
            )));
        }
        let ratio = horizon / flow_dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 10.0 {
            return Err(Error::InvalidArgument(format!(
                "horizon / flow_dt must be an integer >= 10, got {ratio}"
            )));
        }
        Ok(Self {
            sys,
            rho: Arc::new(rho),
            beta: Arc::new(beta),
            horizon,
            flow_dt,
            fd_step: DEFAULT_FD_STEP,
            alpha,
        })
    }

    pub fn with_fd_step(mut self, fd_step: f64) -> Self {
        self.fd_step = fd_step;
        self
    }

    /// Same construction over a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        self.rebuilt(horizon, self.flow_dt)
    }

    pub fn with_flow_dt(&self, flow_dt: f64) -> Result<Self> {
        self.rebuilt(self.horizon, flow_dt)
    }

    fn rebuilt(&self, horizon: f64, flow_dt: f64) -> Result<Self> {
        let (rho, beta) = (self.rho.clone(), self.beta.clone());
        let out = Self::new(self.sys.clone(), move |x| rho(x), move |x| beta(x), horizon, flow_dt, self.alpha)?;
        Ok(out.with_fd_step(self.fd_step))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn flow_dt(&self) -> f64 {
        self.flow_dt
    }

    pub fn rho(&self, x: &DVector<f64>) -> f64 {
        (self.rho)(x)
    }

    pub fn beta(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.beta)(x)
    }

    fn closed_loop(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.sys.dynamics(x, &self.beta(x))
    }
}

/// RK4 samples of the backup flow from `x` on `[0, until]`, including both
/// endpoints. A final partial step is taken when `until` is not a multiple
/// of the flow step.
pub fn backup_flow(b: &BackupCbf, x: &DVector<f64>, until: f64) -> Result<Vec<(f64, DVector<f64>)>> {
    crate::system::check_finite("backup flow initial state", x.iter())?;
    let full = (until / b.flow_dt * (1.0 + 1e-12)).floor() as usize;
    let mut out = Vec::with_capacity(full + 2);
    let mut tau = 0.0;
    let mut state = x.clone();
    out.push((0.0, state.clone()));
    let mut k = 0;
    while tau < until {
        let dt = if k < full { b.flow_dt } else { until - tau };
        if dt <= 1e-12 * b.flow_dt {
            break;
        }
        state = rk4(b, &state, dt).map_err(|_| Error::DivergedFlow {
            tau,
            norm: f64::INFINITY,
        })?;
        k += 1;
        tau = if k <= full { k as f64 * b.flow_dt } else { until };
        let norm = state.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::DivergedFlow { tau, norm });
        }
        out.push((tau, state.clone()));
    }
    Ok(out)
}

fn rk4(b: &BackupCbf, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    let k1 = b.closed_loop(x)?;
    let k2 = b.closed_loop(&(x + &k1 * (0.5 * dt)))?;
    let k3 = b.closed_loop(&(x + &k2 * (0.5 * dt)))?;
    let k4 = b.closed_loop(&(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Minimum of `rho` over the sampled backup flow on `[0, T]`, with the
/// location of the minimum.
pub fn backup_h_detailed(b: &BackupCbf, x: &DVector<f64>) -> Result<BackupValue> {
    let steps = (b.horizon / b.flow_dt).round() as usize;
    let mut state = x.clone();
    crate::system::check_finite("backup flow initial state", state.iter())?;
    let mut best = BackupValue {
        h: b.rho(&state),
        argmin_tau: 0.0,
        at_horizon: false,
    };
    for k in 1..=steps {
        state = rk4(b, &state, b.flow_dt).map_err(|_| Error::DivergedFlow {
            tau: k as f64 * b.flow_dt,
            norm: f64::INFINITY,
        })?;
        let norm = state.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::DivergedFlow {
                tau: k as f64 * b.flow_dt,
                norm,
            });
        }
        let r = b.rho(&state);
        if r < best.h {
            best.h = r;
            best.argmin_tau = k as f64 * b.flow_dt;
        }
    }
    best.at_horizon = best.argmin_tau > 0.0 && steps as f64 * b.flow_dt - best.argmin_tau < 0.5 * b.flow_dt;
    Ok(best)
}

pub fn backup_h(b: &BackupCbf, x: &DVector<f64>) -> Result<f64> {
    Ok(backup_h_detailed(b, x)?.h)
}

/// Central differences of [`backup_h`] with step `fd_step * max(1, |x_i|)`.
pub fn backup_h_gradient(b: &BackupCbf, x: &DVector<f64>) -> Result<DVector<f64>> {
    backup_h_gradient_with_step(b, x, b.fd_step)
}

pub fn backup_h_gradient_with_step(b: &BackupCbf, x: &DVector<f64>, fd_step: f64) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() {
        let s = fd_step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        xp[i] += s;
        let mut xm = x.clone();
        xm[i] -= s;
        let d = (backup_h(b, &xp)? - backup_h(b, &xm)?) / (2.0 * s);
        if !d.is_finite() {
            return Err(Error::NumericalFailure {
                context: "backup barrier gradient",
                coordinate: i,
            });
        }
        grad[i] = d;
    }
    Ok(grad)
}

/// Package as an ordinary barrier. Evaluation failures surface as NaN, which
/// the filters reject as a numerical failure.
pub fn as_barrier_spec(b: &BackupCbf) -> BarrierSpec {
    let bh = b.clone();
    let bg = b.clone();
    let n = b.sys.n();
    BarrierSpec::new(
        move |x| backup_h(&bh, x).unwrap_or(f64::NAN),
        move |x| backup_h_gradient(&bg, x).unwrap_or_else(|_| DVector::from_element(n, f64::NAN)),
        b.alpha,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn braking(u_max: f64, horizon: f64, dt: f64) -> BackupCbf {
        let sys = ControlAffineSystem::new(
            2,
            1,
            |x| v(&[x[1], 0.0]),
            |_| DMatrix::from_vec(2, 1, vec![0.0, 1.0]),
        );
        BackupCbf::new(sys, |x| 1.0 - x[0], move |_| v(&[-u_max]), horizon, dt, ExtendedClassKInf::Linear(1.0))
            .unwrap()
    }

    #[test]
    fn rejects_non_integer_horizon_ratio() {
        let sys = ControlAffineSystem::new(1, 1, |_| v(&[0.0]), |_| DMatrix::from_element(1, 1, 1.0));
        let alpha = ExtendedClassKInf::Linear(1.0);
        assert!(BackupCbf::new(sys.clone(), |_| 0.0, |_| v(&[0.0]), 1.0, 0.3, alpha).is_err());
        assert!(BackupCbf::new(sys.clone(), |_| 0.0, |_| v(&[0.0]), 1.0, 0.2, alpha).is_err());
        assert!(BackupCbf::new(sys, |_| 0.0, |_| v(&[0.0]), 1.0, 0.1, alpha).is_ok());
    }

    #[test]
    fn equilibrium_flow_is_constant() {
        let sys = ControlAffineSystem::new(2, 1, |_| DVector::zeros(2), |_| DMatrix::zeros(2, 1));
        let b = BackupCbf::new(sys, |x| x[0], |_| v(&[0.0]), 1.0, 0.1, ExtendedClassKInf::Linear(1.0)).unwrap();
        let flow = backup_flow(&b, &v(&[0.3, -2.0]), 1.0).unwrap();
        assert_eq!(flow.len(), 11);
        assert!(flow.iter().all(|(_, s)| s == &v(&[0.3, -2.0])));
        assert!((flow.last().unwrap().0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn braking_flow_matches_kinematics() {
        let b = braking(1.0, 5.0, 0.01);
        let flow = backup_flow(&b, &v(&[0.0, 1.0]), 1.0).unwrap();
        let (tau, end) = flow.last().unwrap();
        assert!((tau - 1.0).abs() < 1e-12);
        assert!(end[1].abs() < 1e-6);
        assert!((end[0] - 0.5).abs() < 1e-6);
        // partial final step
        let flow = backup_flow(&b, &v(&[0.0, 1.0]), 0.125).unwrap();
        let (tau, end) = flow.last().unwrap();
        assert!((tau - 0.125).abs() < 1e-12);
        assert!((end[0] - (0.125 - 0.5 * 0.125 * 0.125)).abs() < 1e-12);
    }

    #[test]
    fn rk4_step_halving_shows_fourth_order() {
        // nonlinear backup law so that RK4 is not exact
        let sys = ControlAffineSystem::new(
            2,
            1,
            |x| v(&[x[1], -x[0].sin()]),
            |_| DMatrix::from_vec(2, 1, vec![0.0, 1.0]),
        );
        let make = |dt| {
            BackupCbf::new(sys.clone(), |x| x[0], |x| v(&[-0.5 * x[1]]), 2.0, dt, ExtendedClassKInf::Linear(1.0))
                .unwrap()
        };
        let x0 = v(&[1.0, 0.5]);
        let end = |dt| backup_flow(&make(dt), &x0, 2.0).unwrap().last().unwrap().1.clone();
        let (a, bb, c) = (end(0.1), end(0.05), end(0.025));
        let order = ((&a - &bb).norm() / (&bb - &c).norm()).log2();
        assert!(order > 3.5, "observed order {order}");
    }

    #[test]
    fn braking_barrier_matches_closed_form() {
        let b = braking(1.0, 5.0, 0.01);
        let x = v(&[0.0, 1.0]);
        assert!((backup_h(&b, &x).unwrap() - 0.5).abs() < 1e-3);
        let g = backup_h_gradient(&b, &x).unwrap();
        assert!((g[0] + 1.0).abs() < 2e-2 && (g[1] + 1.0).abs() < 2e-2, "{g}");
        // already at the minimum of rho along the flow
        let at_rest = v(&[0.2, 0.0]);
        assert_eq!(backup_h(&b, &at_rest).unwrap(), b.rho(&at_rest));
    }

    #[test]
    fn constant_rho_has_zero_gradient() {
        let sys = ControlAffineSystem::new(2, 1, |x| v(&[x[1], 0.0]), |_| DMatrix::from_vec(2, 1, vec![0.0, 1.0]));
        let b = BackupCbf::new(sys, |_| 0.7, |_| v(&[-1.0]), 1.0, 0.01, ExtendedClassKInf::Linear(1.0)).unwrap();
        assert!(backup_h_gradient(&b, &v(&[0.4, 0.9])).unwrap().norm() < 1e-12);
    }

    #[test]
    fn richardson_agrees_with_single_step() {
        let b = braking(1.0, 5.0, 0.01);
        let x = v(&[0.1, 0.8]);
        let s = 1e-3;
        let g1 = backup_h_gradient_with_step(&b, &x, s).unwrap();
        let g2 = backup_h_gradient_with_step(&b, &x, s / 2.0).unwrap();
        let extrapolated = (&g2 * 4.0 - &g1) / 3.0;
        // truncation model O(s^2 |h'''|) plus grid-min noise
        assert!((&extrapolated - &g1).norm() < 10.0 * (s * s + 1e-3));
    }

    #[test]
    fn horizon_monotone_and_dominated_by_rho() {
        let b = braking(1.0, 1.0, 0.01);
        let b2 = b.with_horizon(2.0).unwrap();
        for p in [-0.5, 0.0, 0.5] {
            for vel in [0.0, 0.5, 1.5, 2.5] {
                let x = v(&[p, vel]);
                let h = backup_h(&b, &x).unwrap();
                assert!(backup_h(&b2, &x).unwrap() <= h);
                assert!(h <= b.rho(&x) + 1e-12);
            }
        }
        // minimum at the end of a too-short horizon is flagged
        let short = backup_h_detailed(&b, &v(&[0.0, 2.5])).unwrap();
        assert!(short.at_horizon);
        assert!(!backup_h_detailed(&b2, &v(&[0.0, 0.5])).unwrap().at_horizon);
    }

    #[test]
    fn diverging_flow_is_reported() {
        let sys = ControlAffineSystem::new(1, 1, |x| v(&[x[0] * x[0]]), |_| DMatrix::zeros(1, 1));
        let b = BackupCbf::new(sys, |x| -x[0], |_| v(&[0.0]), 2.0, 0.01, ExtendedClassKInf::Linear(1.0)).unwrap();
        assert!(matches!(backup_h(&b, &v(&[1.0])), Err(Error::DivergedFlow { .. })));
        let spec = as_barrier_spec(&b);
        assert!(spec.value(&v(&[1.0])).is_nan());
    }

    #[test]
    fn negative_h_means_rho_dips_along_flow() {
        let b = braking(1.0, 5.0, 0.01);
        let x = v(&[0.5, 1.5]);
        assert!(backup_h(&b, &x).unwrap() < 0.0);
        let flow = backup_flow(&b, &x, 5.0).unwrap();
        assert!(flow.iter().any(|(_, s)| b.rho(s) < 0.0));
    }
}
