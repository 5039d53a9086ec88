//! Pointwise min-norm stabilization of a pendulum with a quadratic CLF,
//! after checking the hand-written gradient against finite differences.
//!
//! cargo run --example clf_min_norm

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use cbf_core::certificate::{check_gradient_consistency, LyapunovSpec};
use cbf_core::class_k::ExtendedClassKInf;
use cbf_core::filters::{in_k_clf, min_norm_clf};
use cbf_core::sim::{plant, run_closed_loop, Passthrough, RunConfig};
use cbf_core::system::ControlAffineSystem;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // torque-driven pendulum, upright at the origin
    let sys = ControlAffineSystem::new(
        2,
        1,
        |x| DVector::from_column_slice(&[x[1], x[0].sin()]),
        |_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
    );
    let lyap = LyapunovSpec::new(
        |x| x[0] * x[0] + x[0] * x[1] + x[1] * x[1],
        |x| DVector::from_column_slice(&[2.0 * x[0] + x[1], x[0] + 2.0 * x[1]]),
        ExtendedClassKInf::Linear(1.0),
        DVector::zeros(2),
    );

    let samples: Vec<DVector<f64>> = (0..5)
        .flat_map(|i| (0..5).map(move |j| DVector::from_column_slice(&[i as f64 * 0.5 - 1.0, j as f64 * 0.5 - 1.0])))
        .collect();
    let report = check_gradient_consistency(&lyap, &samples);
    println!("gradient check pass={} max deviation {:.2e}", report.pass, report.max_deviation);

    let x = DVector::from_column_slice(&[0.5, -0.2]);
    let u = min_norm_clf(&sys, &lyap, &x)?;
    println!("min-norm input at {:?}: {:.4}, in K_clf: {}", x.as_slice(), u[0], in_k_clf(&sys, &lyap, &x, &u));

    let controller = {
        let (sys, lyap) = (sys.clone(), lyap.clone());
        Arc::new(move |x: &DVector<f64>| min_norm_clf(&sys, &lyap, x).unwrap_or_else(|_| DVector::zeros(1)))
    };
    let v_field = {
        let l = lyap.clone();
        Arc::new(move |x: &DVector<f64>| l.value(x))
    };
    let p = plant(sys, Vec::new(), Some(v_field));
    let log = run_closed_loop(&p, &Passthrough::new(controller, None), &RunConfig::new(DVector::from_column_slice(&[1.0, 0.0]), 8.0))?;
    for r in log.rows.iter().step_by(1000) {
        // V must decay at least as fast as exp(-t) V(0)
        println!("t={:.1} V={:.3e} bound={:.3e} u={:+.4}", r.t, r.v, log.rows[0].v * (-r.t).exp(), r.u_act[0]);
    }
    Ok(())
}
