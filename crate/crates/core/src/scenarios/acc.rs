//! Adaptive cruise control with lane keeping.
//!
//! State `(s_f, v_f, y, v_y, s_l, v_l)`: follower position and speed, lateral
//! offset and lateral speed, lead position and speed. Inputs are the
//! longitudinal force `u_l` and the lateral acceleration `u_lat`, bounded by
//! `u_lat_max`. The lead decelerates exponentially from `lead_v` towards
//! `lead_v_final` with time constant `lead_tau`.
//!
//! The unicycle model is provided alongside for the vehicle itself.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{positive, vecf, ParamSet, Scenario};
use crate::certificate::{BarrierSpec, LyapunovSpec};
use crate::class_k::ExtendedClassKInf;
use crate::error::{Error, Result};
use crate::filters::{SafetyConstraint, SafetyFilter, UnifiedController};
use crate::sim::{plant, Controller, Passthrough};
use crate::system::{Bound, ControlAffineSystem};

pub const S_F: usize = 0;
pub const V_F: usize = 1;
pub const Y: usize = 2;
pub const V_Y: usize = 3;
pub const S_L: usize = 4;
pub const V_L: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccParams {
    pub mass: f64,
    pub tau_hw: f64,
    pub lead_v: f64,
    pub lead_x0: f64,
    pub lead_v_final: f64,
    pub lead_tau: f64,
}

impl AccParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.tau_hw > 0.0 && self.lead_tau > 0.0) {
            return Err(Error::InvalidArgument("mass, tau_hw and lead_tau must be positive".into()));
        }
        if !(self.lead_v >= 0.0 && self.lead_v_final >= 0.0) {
            return Err(Error::InvalidArgument("lead speeds must be nonnegative".into()));
        }
        Ok(())
    }

    /// `D - tau_hw v_f` with gap `D = s_l - s_f`.
    pub fn h_asr(&self, x: &DVector<f64>) -> f64 {
        (x[S_L] - x[S_F]) - self.tau_hw * x[V_F]
    }

    pub fn h_asr_grad(&self, _x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(6);
        g[S_F] = -1.0;
        g[V_F] = -self.tau_hw;
        g[S_L] = 1.0;
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneKeepParams {
    pub d_max: f64,
    pub a_max: f64,
}

/// `sign` with `sign(0) = 0`.
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl LaneKeepParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0 && self.a_max > 0.0) {
            return Err(Error::InvalidArgument("d_max and a_max must be positive".into()));
        }
        Ok(())
    }

    /// `d_max - sign(v_y) y - v_y^2 / (2 a_max)`.
    pub fn h_lk_lateral(&self, y: f64, v_y: f64) -> f64 {
        self.d_max - sign0(v_y) * y - 0.5 * v_y * v_y / self.a_max
    }

    pub fn h_lk(&self, x: &DVector<f64>) -> f64 {
        self.h_lk_lateral(x[Y], x[V_Y])
    }

    /// Gradient away from `v_y = 0`, where `h_lk` jumps.
    pub fn h_lk_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(6);
        g[Y] = -sign0(x[V_Y]);
        g[V_Y] = -x[V_Y] / self.a_max;
        g
    }
}

pub fn defaults() -> ParamSet {
    ParamSet::new(&[
        ("mass", 1650.0),
        ("tau_headway", 1.8),
        ("lead_v", 20.0),
        ("lead_x0", 60.0),
        ("lead_v_final", 10.0),
        ("lead_tau", 3.0),
        ("v0", 18.0),
        ("v_desired", 24.0),
        ("d_max", 1.8),
        ("a_max", 2.0),
        ("u_lat_max", 4.0),
        ("y0", 0.0),
        ("y_target", 1.7),
        ("alpha_asr", 1.0),
        ("alpha_lk", 2.0),
        ("clf_rate", 0.8),
        ("k_speed", 1.0),
        ("k_lat", 1.0),
        ("p_relax", 100.0),
        ("duration", 20.0),
        ("ctrl_dt", 0.01),
    ])
}

pub fn acc_params(p: &ParamSet) -> AccParams {
    AccParams {
        mass: p.get("mass"),
        tau_hw: p.get("tau_headway"),
        lead_v: p.get("lead_v"),
        lead_x0: p.get("lead_x0"),
        lead_v_final: p.get("lead_v_final"),
        lead_tau: p.get("lead_tau"),
    }
}

pub fn lane_params(p: &ParamSet) -> LaneKeepParams {
    LaneKeepParams {
        d_max: p.get("d_max"),
        a_max: p.get("a_max"),
    }
}

/// `u_lat_max` is the actuator limit; the barrier assumes braking at the
/// smaller `a_max` so that the lane row keeps authority at its boundary.
pub fn system(acc: AccParams, u_lat_max: f64) -> ControlAffineSystem {
    ControlAffineSystem::new(
        6,
        2,
        move |x| {
            let mut f = DVector::zeros(6);
            f[S_F] = x[V_F];
            f[Y] = x[V_Y];
            f[S_L] = x[V_L];
            f[V_L] = -(x[V_L] - acc.lead_v_final) / acc.lead_tau;
            f
        },
        move |_| {
            let mut g = DMatrix::zeros(6, 2);
            g[(V_F, 0)] = 1.0 / acc.mass;
            g[(V_Y, 1)] = 1.0;
            g
        },
    )
    .with_input_box(vec![Bound::unbounded(), Bound::symmetric(u_lat_max)])
}

pub fn build(p: &ParamSet) -> Result<Scenario> {
    positive(p, &["alpha_asr", "alpha_lk", "clf_rate", "k_speed", "k_lat", "p_relax", "duration", "ctrl_dt"])?;
    let acc = acc_params(p);
    let lk = lane_params(p);
    acc.validate()?;
    lk.validate()?;
    let u_lat_max = p.get("u_lat_max");
    if !(u_lat_max >= lk.a_max) {
        return Err(Error::InvalidArgument(format!(
            "u_lat_max must be at least a_max = {}, got {u_lat_max}",
            lk.a_max
        )));
    }
    let sys = system(acc, u_lat_max);

    let asr = BarrierSpec::new(
        move |x| acc.h_asr(x),
        move |x| acc.h_asr_grad(x),
        ExtendedClassKInf::linear(p.get("alpha_asr"))?,
    );
    let lane = BarrierSpec::new(
        move |x| lk.h_lk(x),
        move |x| lk.h_lk_grad(x),
        ExtendedClassKInf::linear(p.get("alpha_lk"))?,
    );

    // V = k_speed/2 (v_f - v_d)^2 + k_lat (e^2 + e v_y + v_y^2), e = y - y_target
    let (v_d, y_t, ks, kl) = (p.get("v_desired"), p.get("y_target"), p.get("k_speed"), p.get("k_lat"));
    let lyap = LyapunovSpec::new(
        move |x| {
            let e = x[Y] - y_t;
            0.5 * ks * (x[V_F] - v_d).powi(2) + kl * (e * e + e * x[V_Y] + x[V_Y] * x[V_Y])
        },
        move |x| {
            let e = x[Y] - y_t;
            let mut g = DVector::zeros(6);
            g[V_F] = ks * (x[V_F] - v_d);
            g[Y] = kl * (2.0 * e + x[V_Y]);
            g[V_Y] = kl * (e + 2.0 * x[V_Y]);
            g
        },
        ExtendedClassKInf::linear(p.get("clf_rate"))?,
        {
            let mut eq = DVector::zeros(6);
            eq[V_F] = v_d;
            eq[Y] = y_t;
            eq
        },
    );

    let mass = acc.mass;
    let cost = move |_: &DVector<f64>| DMatrix::from_diagonal(&vecf(&[1.0 / (mass * mass), 1.0]));
    let rows: Vec<Arc<dyn SafetyConstraint>> = vec![Arc::new(asr.clone()), Arc::new(lane.clone())];
    let p_relax = p.get("p_relax");
    let unified = UnifiedController::from_constraints(sys.clone(), lyap.clone(), rows.clone())
        .with_cost(cost)
        .with_p_relax(p_relax)?;
    let clf_only = unified.without_constraints();

    // proportional speed loop and PD lateral loop towards the same targets
    let nominal: crate::system::VectorField = Arc::new(move |x: &DVector<f64>| {
        let e = x[Y] - y_t;
        vecf(&[mass * (v_d - x[V_F]), -e - 1.5 * x[V_Y]])
    });
    let filter = SafetyFilter::from_constraints(sys.clone(), rows, nominal.clone());
    let passthrough = Passthrough::new(nominal, sys.input_box().map(|b| b.to_vec()));

    let mut x0 = DVector::zeros(6);
    x0[V_F] = p.get("v0");
    x0[Y] = p.get("y0");
    x0[S_L] = acc.lead_x0;
    x0[V_L] = acc.lead_v;

    let check_samples = (0..24)
        .map(|i| {
            let s = i as f64;
            let vy = if i % 2 == 0 { 0.3 + 0.05 * s } else { -0.2 - 0.04 * s };
            vecf(&[2.0 * s, 15.0 + 0.4 * s, -1.0 + 0.1 * s, vy, 40.0 + 3.0 * s, 12.0 + 0.3 * s])
        })
        .collect();

    let lyap_field = {
        let l = lyap.clone();
        Arc::new(move |x: &DVector<f64>| l.value(x)) as crate::system::ScalarField
    };
    let controllers: Vec<(&'static str, Arc<dyn Controller>)> = vec![
        ("clf_cbf_qp", Arc::new(unified)),
        ("clf_qp", Arc::new(clf_only)),
        ("safety_filter", Arc::new(filter)),
        ("nominal", Arc::new(passthrough)),
    ];
    Ok(Scenario {
        name: "acc_lk",
        plant: plant(
            sys,
            vec![("h_asr".into(), asr.value_field()), ("h_lk".into(), lane.value_field())],
            Some(lyap_field),
        ),
        x0,
        duration: p.get("duration"),
        ctrl_dt: p.get("ctrl_dt"),
        sim_substeps: 1,
        barriers: vec![("h_asr".into(), asr), ("h_lk".into(), lane)],
        lyapunov: Some(lyap),
        designs: Vec::new(),
        check_samples,
        controllers,
        filter_on: "clf_cbf_qp",
        filter_off: "clf_qp",
        params: p.clone(),
    })
}

/// Unicycle with an offset point: state `(p_x, p_y, v, psi, omega)`, inputs
/// longitudinal force `u_l` and yaw torque `u_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleParams {
    pub m: f64,
    pub i_z: f64,
    pub a: f64,
}

impl UnicycleParams {
    /// `m, I_z > 0` and `a >= 0`.
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.i_z > 0.0 && self.a >= 0.0) {
            return Err(Error::InvalidArgument("unicycle needs m, I_z > 0 and a >= 0".into()));
        }
        Ok(())
    }

    pub fn system(&self) -> ControlAffineSystem {
        let UnicycleParams { m, i_z, a } = *self;
        let j = i_z + m * a * a;
        ControlAffineSystem::new(
            5,
            2,
            move |x| {
                let (v, psi, w) = (x[2], x[3], x[4]);
                vecf(&[
                    v * psi.cos() - a * w * psi.sin(),
                    v * psi.sin() + a * w * psi.cos(),
                    a * w * w,
                    w,
                    -m * a * v * w / j,
                ])
            },
            move |_| {
                let mut g = DMatrix::zeros(5, 2);
                g[(2, 0)] = 1.0 / m;
                g[(4, 1)] = 1.0 / j;
                g
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::cbf_constraint_row;
    use crate::sim::rk4_step;

    fn p() -> ParamSet {
        defaults()
    }

    #[test]
    fn headway_barrier_arithmetic() {
        let acc = AccParams {
            tau_hw: 1.8,
            ..acc_params(&p())
        };
        let mut x = DVector::zeros(6);
        x[S_L] = 10.0;
        x[V_F] = 5.0;
        assert!((acc.h_asr(&x) - 1.0).abs() < 1e-12);
        x[V_F] = 0.0;
        assert_eq!(acc.h_asr(&x), 10.0);
    }

    #[test]
    fn lane_barrier_arithmetic() {
        let lk = LaneKeepParams { d_max: 1.0, a_max: 2.0 };
        assert_eq!(lk.h_lk_lateral(0.0, 0.0), 1.0);
        assert!((lk.h_lk_lateral(0.5, 1.0) - 0.25).abs() < 1e-15);
        assert_eq!(lk.h_lk_lateral(0.7, 0.0), 1.0);
    }

    #[test]
    fn braking_from_lane_boundary_margin_peaks_at_d_max() {
        // h_lk = 0 with v_y = 1.2: y = d_max - v^2/(2 a_max)
        let lk = LaneKeepParams { d_max: 1.8, a_max: 2.0 };
        let (mut y, mut v) = (lk.d_max - 1.2 * 1.2 / (2.0 * lk.a_max), 1.2);
        assert!(lk.h_lk_lateral(y, v).abs() < 1e-12);
        let sys = ControlAffineSystem::new(2, 1, |x| vecf(&[x[1], 0.0]), |_| DMatrix::from_vec(2, 1, vec![0.0, 1.0]));
        let mut peak = y;
        let dt = 1e-4;
        while v > 0.0 {
            let x = rk4_step(&sys, &vecf(&[y, v]), &vecf(&[-lk.a_max]), dt).unwrap();
            y = x[0];
            v = x[1];
            peak = peak.max(y);
        }
        assert!((peak - lk.d_max).abs() < 1e-3, "{peak}");
    }

    #[test]
    fn headway_row_matches_symbolic_derivative() {
        let s = build(&p()).unwrap();
        let (_, asr) = &s.barriers[0];
        let acc = acc_params(&p());
        for i in 0..10 {
            let t = i as f64;
            let x = vecf(&[t, 10.0 + t, 0.1 * t, -0.3, 50.0 + 2.0 * t, 14.0 - t]);
            let (a, b) = cbf_constraint_row(&s.plant.sys, asr, &x).unwrap();
            // hdot = v_l - v_f - tau u_l / m
            let lf = x[V_L] - x[V_F];
            assert!((a[0] + acc.tau_hw / acc.mass).abs() < 1e-10);
            assert_eq!(a[1], 0.0);
            assert!((b - (-lf - acc.h_asr(&x))).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_are_consistent() {
        let s = build(&p()).unwrap();
        let report = s.check().unwrap();
        assert!(report.pass(), "{report:?}");
    }

    #[test]
    fn unicycle_coasts_at_constant_speed_without_offset() {
        let uni = UnicycleParams { m: 2.0, i_z: 0.5, a: 0.0 };
        uni.validate().unwrap();
        let sys = uni.system();
        let mut x = vecf(&[0.0, 0.0, 1.3, 0.2, 0.7]);
        for _ in 0..2000 {
            x = rk4_step(&sys, &x, &vecf(&[0.0, 0.0]), 1e-3).unwrap();
        }
        assert!((x[2] - 1.3).abs() < 1e-9);
        assert!(UnicycleParams { m: 0.0, i_z: 1.0, a: 0.1 }.validate().is_err());
    }

    #[test]
    fn unicycle_rk4_is_fourth_order() {
        let sys = UnicycleParams { m: 2.0, i_z: 0.5, a: 0.2 }.system();
        let x0 = vecf(&[0.0, 0.0, 1.0, 0.3, 0.8]);
        let u = vecf(&[0.4, -0.2]);
        let end = |n: usize| {
            let mut x = x0.clone();
            for _ in 0..n {
                x = rk4_step(&sys, &x, &u, 2.0 / n as f64).unwrap();
            }
            x
        };
        let (a, b, c) = (end(20), end(40), end(80));
        let order = ((&a - &b).norm() / (&b - &c).norm()).log2();
        assert!(order > 3.5, "{order}");
    }
}
