//! Braking to a wall: a double integrator `(p, v)` with acceleration input,
//! safe set `p <= 1`, and a backup law that brakes at full authority.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{positive, vecf, ParamSet, Scenario};
use crate::backup::{as_barrier_spec, backup_h, BackupCbf};
use crate::class_k::ExtendedClassKInf;
use crate::error::Result;
use crate::filters::SafetyFilter;
use crate::sim::{plant, Controller, Passthrough};
use crate::system::{Bound, ControlAffineSystem, ScalarField, VectorField};

pub const WALL: f64 = 1.0;

pub fn defaults() -> ParamSet {
    ParamSet::new(&[
        ("u_max", 1.0),
        ("horizon", 5.0),
        ("flow_dt", 0.01),
        ("fd_step", 1e-2),
        ("alpha", 0.5),
        ("v_ref", 1.0),
        ("k_speed", 1.0),
        ("p0", -1.0),
        ("v0", 0.5),
        ("duration", 10.0),
        ("ctrl_dt", 0.01),
    ])
}

pub fn system(u_max: f64) -> ControlAffineSystem {
    ControlAffineSystem::new(2, 1, |x| vecf(&[x[1], 0.0]), |_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]))
        .with_input_box(vec![Bound::symmetric(u_max)])
}

/// Closed-form stopping margin `1 - p - v^2 / (2 u_max)` for `v >= 0`.
pub fn stopping_margin(x: &DVector<f64>, u_max: f64) -> f64 {
    WALL - x[0] - x[1].max(0.0).powi(2) / (2.0 * u_max)
}

pub fn backup_barrier(p: &ParamSet) -> Result<BackupCbf> {
    positive(p, &["u_max", "horizon", "flow_dt", "fd_step", "alpha"])?;
    let u_max = p.get("u_max");
    BackupCbf::new(
        system(u_max),
        |x| WALL - x[0],
        move |_| vecf(&[-u_max]),
        p.get("horizon"),
        p.get("flow_dt"),
        ExtendedClassKInf::linear(p.get("alpha"))?,
    )
    .map(|b| b.with_fd_step(p.get("fd_step")))
}

pub fn build(p: &ParamSet) -> Result<Scenario> {
    positive(p, &["k_speed", "duration", "ctrl_dt"])?;
    let sys = system(p.get("u_max"));
    let bk = backup_barrier(p)?;
    let (v_ref, k) = (p.get("v_ref"), p.get("k_speed"));
    let nominal: VectorField = Arc::new(move |x: &DVector<f64>| vecf(&[k * (v_ref - x[1])]));
    let filter = SafetyFilter::from_constraints(sys.without_input_box(), vec![Arc::new(as_barrier_spec(&bk))], nominal.clone());
    let passthrough = Passthrough::new(nominal, sys.input_box().map(|b| b.to_vec()));
    let bh = bk.clone();
    let h_field: ScalarField = Arc::new(move |x: &DVector<f64>| backup_h(&bh, x).unwrap_or(f64::NAN));
    let wall: ScalarField = Arc::new(|x: &DVector<f64>| WALL - x[0]);
    let controllers: Vec<(&'static str, Arc<dyn Controller>)> =
        vec![("backup_filter", Arc::new(filter)), ("nominal", Arc::new(passthrough))];
    let samples = (0..12).map(|i| vecf(&[-1.0 + 0.15 * i as f64, 0.1 * i as f64])).collect();
    Ok(Scenario {
        name: "braking",
        plant: plant(sys, vec![("h_backup".into(), h_field), ("wall".into(), wall)], None),
        x0: vecf(&[p.get("p0"), p.get("v0")]),
        duration: p.get("duration"),
        ctrl_dt: p.get("ctrl_dt"),
        sim_substeps: 10,
        barriers: Vec::new(),
        lyapunov: None,
        designs: Vec::new(),
        check_samples: samples,
        controllers,
        filter_on: "backup_filter",
        filter_off: "nominal",
        params: p.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backup_barrier_matches_stopping_margin() {
        let b = backup_barrier(&defaults()).unwrap();
        for x in [vecf(&[0.0, 0.5]), vecf(&[-1.0, 1.5]), vecf(&[0.5, 0.9])] {
            let h = backup_h(&b, &x).unwrap();
            // the grid minimum can only overestimate the continuous one
            let exact = stopping_margin(&x, 1.0);
            assert!(h >= exact - 1e-12 && h - exact < 0.01 * x[1] + 1e-9, "{h} {exact}");
        }
    }
}
