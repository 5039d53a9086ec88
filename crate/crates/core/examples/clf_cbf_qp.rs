//! Reach a goal past a circular obstacle with the relaxed CLF-CBF QP, and
//! see how the relaxation weight trades convergence for clearance.
//!
//! cargo run --example clf_cbf_qp

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use cbf_core::certificate::{BarrierSpec, LyapunovSpec};
use cbf_core::class_k::ExtendedClassKInf;
use cbf_core::filters::UnifiedController;
use cbf_core::sim::{invariance_report, plant, run_closed_loop, RunConfig};
use cbf_core::system::ControlAffineSystem;

const GOAL: [f64; 2] = [4.0, 0.0];
const CENTER: [f64; 2] = [2.0, 0.0];
const RADIUS: f64 = 0.8;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // planar single integrator
    let sys = ControlAffineSystem::new(2, 2, |_| DVector::zeros(2), |_| DMatrix::identity(2, 2));
    let lyap = LyapunovSpec::new(
        |x| (x[0] - GOAL[0]).powi(2) + (x[1] - GOAL[1]).powi(2),
        |x| DVector::from_column_slice(&[2.0 * (x[0] - GOAL[0]), 2.0 * (x[1] - GOAL[1])]),
        ExtendedClassKInf::Linear(1.0),
        DVector::from_column_slice(&GOAL),
    );
    let h = |x: &DVector<f64>| (x[0] - CENTER[0]).powi(2) + (x[1] - CENTER[1]).powi(2) - RADIUS * RADIUS;
    let obstacle = BarrierSpec::new(
        h,
        |x| DVector::from_column_slice(&[2.0 * (x[0] - CENTER[0]), 2.0 * (x[1] - CENTER[1])]),
        ExtendedClassKInf::Linear(1.0),
    );
    let v_field = {
        let l = lyap.clone();
        Arc::new(move |x: &DVector<f64>| l.value(x))
    };
    let p = plant(sys.clone(), vec![("obstacle".into(), Arc::new(h))], Some(v_field));
    // slightly off the symmetry axis so the obstacle can be passed
    let cfg = RunConfig::new(DVector::from_column_slice(&[0.0, 0.05]), 12.0);

    let base = UnifiedController::new(sys, lyap, obstacle);
    let out = base.solve(&cfg.x0)?;
    println!("first step: u={:?} delta={:.4} active={:?}", out.u.as_slice(), out.delta, out.active_set);

    for p_relax in [0.1, 1.0, 10.0, 100.0] {
        let ctrl = base.clone().with_p_relax(p_relax)?;
        let log = run_closed_loop(&p, &ctrl, &cfg)?;
        let r = invariance_report(&log, 1e-3);
        let last = log.rows.last().expect("nonempty log");
        let max_delta = log.deltas().fold(0.0, f64::max);
        println!(
            "p={p_relax:<6} safe={} min h={:+.4} max delta={:.3} final V={:.2e}",
            r.safe, r.barriers[0].min_h, max_delta, last.v
        );
    }

    // without the barrier row the CLF alone drives straight through
    let log = run_closed_loop(&p, &base.without_constraints(), &cfg)?;
    println!("CLF only: min h={:+.4}", log.min_h(0));
    Ok(())
}
