//! Segway-lite: a linearised two-wheeled inverted pendulum.
//!
//! State `(v, phi, phidot, t)`, input motor voltage `u` in `[-15, 15]`:
//!
//! ```text
//!   vdot      = -k_v v + k_phi phi + b_v u
//!   phiddot   = w0^2 phi - c_d phidot + c_v v - b_phi u
//!   tdot      = 1
//! ```
//!
//! The clock `t` drives a sinusoidal pitch reference for the nominal
//! controller. Two variants: angle barriers `phi_max -/+ phi` enforced as
//! relative-degree-2 exponential barriers, and a backup-controller barrier
//! built from the state box with a saturated stabilising law.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{positive, vecf, ParamSet, Scenario};
use crate::backup::{as_barrier_spec, backup_h, BackupCbf};
use crate::certificate::BarrierSpec;
use crate::class_k::ExtendedClassKInf;
use crate::ecbf::{EcbfDesign, LieChain};
use crate::error::Result;
use crate::filters::{SafetyConstraint, SafetyFilter};
use crate::sim::{plant, Controller, Kick, Passthrough};
use crate::system::{Bound, ControlAffineSystem, ScalarField, VectorField};

pub const V: usize = 0;
pub const PHI: usize = 1;
pub const DPHI: usize = 2;
pub const CLOCK: usize = 3;

pub const PHI_MAX: f64 = PI / 12.0;
pub const DPHI_MAX: f64 = 2.0 * PI;
pub const V_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegwayLiteParams {
    pub omega0_sq: f64,
    pub c_d: f64,
    pub c_v: f64,
    pub k_v: f64,
    pub k_phi: f64,
    pub b_v: f64,
    pub b_phi: f64,
    pub u_max: f64,
}

impl SegwayLiteParams {
    /// Pitch acceleration without input.
    pub fn phi_drift(&self, x: &DVector<f64>) -> f64 {
        self.omega0_sq * x[PHI] - self.c_d * x[DPHI] + self.c_v * x[V]
    }

    pub fn system(&self) -> ControlAffineSystem {
        let s = *self;
        ControlAffineSystem::new(
            4,
            1,
            move |x| vecf(&[-s.k_v * x[V] + s.k_phi * x[PHI], x[DPHI], s.phi_drift(x), 1.0]),
            move |_| DMatrix::from_column_slice(4, 1, &[s.b_v, 0.0, -s.b_phi, 0.0]),
        )
        .with_input_box(vec![Bound::symmetric(s.u_max)])
        .with_domain_box(vec![
            Bound::symmetric(V_MAX),
            Bound::symmetric(PHI_MAX),
            Bound::symmetric(DPHI_MAX),
            Bound::new(0.0, f64::INFINITY),
        ])
    }

    /// Relative-degree-2 chain of `phi_max - phi` (`upper`) or
    /// `phi_max + phi`.
    pub fn angle_chain(&self, upper: bool) -> LieChain {
        let s = *self;
        let sg = if upper { -1.0 } else { 1.0 };
        let h: ScalarField = Arc::new(move |x: &DVector<f64>| PHI_MAX + sg * x[PHI]);
        let lf: ScalarField = Arc::new(move |x: &DVector<f64>| sg * x[DPHI]);
        let lf2: ScalarField = Arc::new(move |x: &DVector<f64>| sg * s.phi_drift(x));
        let lglf: VectorField = Arc::new(move |_: &DVector<f64>| vecf(&[-sg * s.b_phi]));
        LieChain::new(vec![h, lf, lf2], lglf).expect("three chain entries")
    }

    /// Smallest normalised margin to the state box, in radians of pitch.
    pub fn box_margin(x: &DVector<f64>) -> f64 {
        let phi = PHI_MAX - x[PHI].abs();
        let dphi = (DPHI_MAX - x[DPHI].abs()) * PHI_MAX / DPHI_MAX;
        let v = (V_MAX - x[V].abs()) * PHI_MAX / V_MAX;
        phi.min(dphi).min(v)
    }
}

/// Sinusoidal pitch reference `A sin(2 pi t / T)` with its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchReference {
    pub amplitude: f64,
    pub period: f64,
}

impl PitchReference {
    pub fn at(&self, t: f64) -> (f64, f64, f64) {
        let w = 2.0 * PI / self.period;
        let (s, c) = (w * t).sin_cos();
        (self.amplitude * s, self.amplitude * w * c, -self.amplitude * w * w * s)
    }
}

fn common_defaults() -> Vec<(&'static str, f64)> {
    vec![
        ("omega0_sq", 12.0),
        ("c_d", 0.5),
        ("c_v", 0.3),
        ("k_v", 1.0),
        ("k_phi", 2.0),
        ("b_v", 0.5),
        ("b_phi", 2.0),
        ("u_max", 15.0),
        ("ref_amplitude", 0.4),
        ("ref_period", 5.0),
        ("kp", 25.0),
        ("kd", 10.0),
        ("v0", 0.0),
        ("phi0", 0.0),
        ("dphi0", 0.0),
        ("t0", 0.0),
        ("kick_time", 5.0),
        ("kick_dphi", 0.0),
        ("duration", 12.0),
    ]
}

pub fn lite_defaults() -> ParamSet {
    let mut d = common_defaults();
    d.extend([("pole_1", 5.0), ("pole_2", 10.0), ("ctrl_dt", 0.001)]);
    ParamSet::new(&d)
}

pub fn backup_defaults() -> ParamSet {
    let mut d = common_defaults();
    d.extend([
        ("backup_k_phi", 16.0),
        ("backup_k_dphi", 8.0),
        ("horizon", 2.0),
        ("flow_dt", 0.01),
        ("fd_step", 1e-2),
        ("alpha", 1.0),
        ("ctrl_dt", 0.01),
    ]);
    ParamSet::new(&d)
}

pub fn segway_params(p: &ParamSet) -> SegwayLiteParams {
    SegwayLiteParams {
        omega0_sq: p.get("omega0_sq"),
        c_d: p.get("c_d"),
        c_v: p.get("c_v"),
        k_v: p.get("k_v"),
        k_phi: p.get("k_phi"),
        b_v: p.get("b_v"),
        b_phi: p.get("b_phi"),
        u_max: p.get("u_max"),
    }
}

/// Feedback-linearising pitch tracker for the sinusoidal reference.
pub fn tracking_nominal(s: SegwayLiteParams, r: PitchReference, kp: f64, kd: f64) -> VectorField {
    Arc::new(move |x: &DVector<f64>| {
        let (phi_r, dphi_r, ddphi_r) = r.at(x[CLOCK]);
        let ddphi_des = ddphi_r - kp * (x[PHI] - phi_r) - kd * (x[DPHI] - dphi_r);
        vecf(&[(s.phi_drift(x) - ddphi_des) / s.b_phi])
    })
}

struct Common {
    s: SegwayLiteParams,
    sys: ControlAffineSystem,
    nominal: VectorField,
    x0: DVector<f64>,
    kicks: Vec<Kick>,
    samples: Vec<DVector<f64>>,
}

fn common(p: &ParamSet) -> Result<Common> {
    positive(
        p,
        &["omega0_sq", "k_v", "b_phi", "u_max", "ref_period", "kp", "kd", "duration", "ctrl_dt"],
    )?;
    let s = segway_params(p);
    let r = PitchReference {
        amplitude: p.get("ref_amplitude"),
        period: p.get("ref_period"),
    };
    let kick = p.get("kick_dphi");
    let kicks = if kick != 0.0 {
        vec![Kick {
            t: p.get("kick_time"),
            dx: vecf(&[0.0, 0.0, kick, 0.0]),
        }]
    } else {
        Vec::new()
    };
    let samples = (0..24)
        .map(|i| {
            let a = i as f64 * 0.37;
            vecf(&[2.0 * a.sin(), 0.2 * (1.7 * a).cos(), 3.0 * (0.6 * a).sin(), a])
        })
        .collect();
    Ok(Common {
        s,
        sys: s.system(),
        nominal: tracking_nominal(s, r, p.get("kp"), p.get("kd")),
        x0: vecf(&[p.get("v0"), p.get("phi0"), p.get("dphi0"), p.get("t0")]),
        kicks,
        samples,
    })
}

pub fn build_lite(p: &ParamSet) -> Result<Scenario> {
    let c = common(p)?;
    let poles = vec![p.get("pole_1"), p.get("pole_2")];
    let hi = Arc::new(EcbfDesign::new(c.s.angle_chain(true), poles.clone())?);
    let lo = Arc::new(EcbfDesign::new(c.s.angle_chain(false), poles)?);
    let rows: Vec<Arc<dyn SafetyConstraint>> = vec![hi.clone(), lo.clone()];
    let filter = SafetyFilter::from_constraints(c.sys.clone(), rows, c.nominal.clone());
    let passthrough = Passthrough::new(c.nominal, c.sys.input_box().map(|b| b.to_vec()));

    let alpha = ExtendedClassKInf::linear(hi.k_alpha()[0])?;
    let b_hi = BarrierSpec::new(|x| PHI_MAX - x[PHI], |_| vecf(&[0.0, -1.0, 0.0, 0.0]), alpha);
    let b_lo = BarrierSpec::new(|x| PHI_MAX + x[PHI], |_| vecf(&[0.0, 1.0, 0.0, 0.0]), alpha);

    let mut pl = plant(
        c.sys,
        vec![("h_hi".into(), b_hi.value_field()), ("h_lo".into(), b_lo.value_field())],
        None,
    );
    pl.kicks = c.kicks;
    let controllers: Vec<(&'static str, Arc<dyn Controller>)> =
        vec![("safety_filter", Arc::new(filter)), ("nominal", Arc::new(passthrough))];
    Ok(Scenario {
        name: "segway_lite",
        plant: pl,
        x0: c.x0,
        duration: p.get("duration"),
        ctrl_dt: p.get("ctrl_dt"),
        sim_substeps: 1,
        barriers: vec![("h_hi".into(), b_hi), ("h_lo".into(), b_lo)],
        lyapunov: None,
        designs: vec![hi, lo],
        check_samples: c.samples,
        controllers,
        filter_on: "safety_filter",
        filter_off: "nominal",
        params: p.clone(),
    })
}

/// Saturated linear law stabilising the upright.
pub fn backup_law(s: SegwayLiteParams, k_phi: f64, k_dphi: f64) -> impl Fn(&DVector<f64>) -> DVector<f64> + Clone {
    move |x: &DVector<f64>| {
        let u = ((s.omega0_sq + k_phi) * x[PHI] + k_dphi * x[DPHI]) / s.b_phi;
        vecf(&[u.clamp(-s.u_max, s.u_max)])
    }
}

pub fn backup_barrier(p: &ParamSet) -> Result<BackupCbf> {
    positive(p, &["backup_k_phi", "backup_k_dphi", "horizon", "flow_dt", "fd_step", "alpha"])?;
    let s = segway_params(p);
    BackupCbf::new(
        s.system(),
        SegwayLiteParams::box_margin,
        backup_law(s, p.get("backup_k_phi"), p.get("backup_k_dphi")),
        p.get("horizon"),
        p.get("flow_dt"),
        ExtendedClassKInf::linear(p.get("alpha"))?,
    )
    .map(|b| b.with_fd_step(p.get("fd_step")))
}

pub fn build_backup(p: &ParamSet) -> Result<Scenario> {
    let c = common(p)?;
    let bk = backup_barrier(p)?;
    let spec = as_barrier_spec(&bk);
    // the finite-difference gradient is only accurate to ~fd_step, so the
    // input box is left to the backup law and the projection is closed form
    let filter = SafetyFilter::from_constraints(c.sys.without_input_box(), vec![Arc::new(spec)], c.nominal.clone());
    let passthrough = Passthrough::new(c.nominal, c.sys.input_box().map(|b| b.to_vec()));
    let bh = bk.clone();
    let h_field: ScalarField = Arc::new(move |x: &DVector<f64>| backup_h(&bh, x).unwrap_or(f64::NAN));
    let rho_field: ScalarField = Arc::new(SegwayLiteParams::box_margin);
    let mut pl = plant(c.sys, vec![("h_backup".into(), h_field), ("rho".into(), rho_field)], None);
    pl.kicks = c.kicks;
    let controllers: Vec<(&'static str, Arc<dyn Controller>)> =
        vec![("backup_filter", Arc::new(filter)), ("nominal", Arc::new(passthrough))];
    Ok(Scenario {
        name: "segway_backup",
        plant: pl,
        x0: c.x0,
        duration: p.get("duration"),
        ctrl_dt: p.get("ctrl_dt"),
        sim_substeps: 10,
        barriers: Vec::new(),
        lyapunov: None,
        designs: Vec::new(),
        check_samples: c.samples,
        controllers,
        filter_on: "backup_filter",
        filter_off: "nominal",
        params: p.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecbf::ecbf_constraint_row;

    #[test]
    fn chains_and_gradients_are_consistent() {
        let s = build_lite(&lite_defaults()).unwrap();
        let report = s.check().unwrap();
        assert!(report.pass(), "{report:?}");
    }

    #[test]
    fn angle_rows_are_jointly_feasible() {
        let s = build_lite(&lite_defaults()).unwrap();
        for x in &s.check_samples {
            let (a1, b1) = ecbf_constraint_row(&s.designs[0], x).unwrap();
            let (a2, b2) = ecbf_constraint_row(&s.designs[1], x).unwrap();
            // b_phi u >= b1 and -b_phi u >= b2
            assert!(a1[0] > 0.0 && a2[0] < 0.0);
            assert!(b1 / a1[0] <= b2 / a2[0]);
        }
    }

    #[test]
    fn backup_law_respects_input_box() {
        let s = segway_params(&backup_defaults());
        let beta = backup_law(s, 16.0, 8.0);
        for x in &common(&backup_defaults()).unwrap().samples {
            assert!(beta(x)[0].abs() <= s.u_max);
        }
    }

    #[test]
    fn backup_barrier_below_margin_and_positive_at_rest() {
        let b = backup_barrier(&backup_defaults()).unwrap();
        let rest = vecf(&[0.0, 0.0, 0.0, 0.0]);
        let h = backup_h(&b, &rest).unwrap();
        assert!((h - PHI_MAX).abs() < 1e-12);
        let tilted = vecf(&[0.0, 0.2, 1.0, 0.0]);
        let h = backup_h(&b, &tilted).unwrap();
        assert!(h <= SegwayLiteParams::box_margin(&tilted) + 1e-12);
    }

    #[test]
    fn reference_derivatives_are_consistent() {
        let r = PitchReference { amplitude: 0.4, period: 5.0 };
        let (t, e) = (1.3, 1e-5);
        let (p0, d0, dd0) = r.at(t);
        assert!(((r.at(t + e).0 - r.at(t - e).0) / (2.0 * e) - d0).abs() < 1e-8);
        assert!(((r.at(t + e).1 - r.at(t - e).1) / (2.0 * e) - dd0).abs() < 1e-8);
        assert!(p0.abs() <= 0.4);
    }
}
