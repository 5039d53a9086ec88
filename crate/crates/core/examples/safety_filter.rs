//! Wrap an aggressive nominal controller with a CBF safety filter and
//! compare closed-loop runs with and without it.
//!
//! cargo run --example safety_filter

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use cbf_core::certificate::BarrierSpec;
use cbf_core::class_k::ExtendedClassKInf;
use cbf_core::filters::{in_k_cbf, SafetyFilter};
use cbf_core::sim::{invariance_report, plant, run_closed_loop, Passthrough, RunConfig};
use cbf_core::system::{Bound, ControlAffineSystem};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // double integrator (position, velocity) with a wall at position 1
    let sys = ControlAffineSystem::new(
        2,
        1,
        |x| DVector::from_column_slice(&[x[1], 0.0]),
        |_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
    )
    .with_input_box(vec![Bound::symmetric(2.0)]);
    // stay far enough from the wall to stop at deceleration 1.5, leaving
    // headroom below the input limit
    let h = |x: &DVector<f64>| 1.0 - x[0] - x[1].max(0.0).powi(2) / 3.0;
    let barrier = BarrierSpec::new(
        h,
        |x| DVector::from_column_slice(&[-1.0, -2.0 * x[1].max(0.0) / 3.0]),
        ExtendedClassKInf::Linear(2.0),
    );
    // lightly damped approach to a target just before the wall; the
    // unfiltered loop overshoots through it
    let nominal = |x: &DVector<f64>| DVector::from_column_slice(&[20.0 * (0.95 - x[0]) - 1.0 * x[1]]);

    let filter = SafetyFilter::new(sys.clone(), barrier.clone(), nominal);
    let x = DVector::from_column_slice(&[0.5, 1.0]);
    let (u, diag) = filter.filter(&x)?;
    println!(
        "at {:?}: nominal {:.3} -> filtered {:.3} via {:?}, in K_cbf: {}",
        x.as_slice(),
        diag.u_des[0],
        u[0],
        diag.path,
        in_k_cbf(&sys, &barrier, &x, &u)
    );

    let p = plant(sys, vec![("wall".into(), Arc::new(h))], None);
    let cfg = RunConfig::new(DVector::from_column_slice(&[0.0, 0.0]), 8.0);
    let unfiltered = Passthrough::new(Arc::new(nominal), Some(vec![Bound::symmetric(2.0)]));
    for (name, log) in [
        ("filtered", run_closed_loop(&p, &filter, &cfg)?),
        ("nominal", run_closed_loop(&p, &unfiltered, &cfg)?),
    ] {
        let r = invariance_report(&log, 1e-3);
        let last = log.rows.last().expect("nonempty log");
        println!(
            "{name:9} safe={} min h={:+.4} final position {:.4} max |u - u_des|={:.3}",
            r.safe, r.barriers[0].min_h, last.x[0], r.max_perturbation
        );
        if let Some(f) = &log.failure {
            println!("          stopped at t={:.3}: {}", f.t, f.message);
        }
    }
    Ok(())
}
