//! Segway pitch tracking under an angle limit: exponential barriers on the
//! pitch, a kick to the pitch rate mid-run, and recovery from a start
//! outside the safe set.
//!
//! cargo run --release --example segway

use cbf_core::scenarios::build_with;
use cbf_core::scenarios::segway::{PHI, PHI_MAX};
use cbf_core::sim::invariance_report;

fn max_pitch(log: &cbf_core::sim::TrajectoryLog) -> f64 {
    log.rows.iter().map(|r| r.x[PHI].abs()).fold(0.0, f64::max)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("pitch limit {PHI_MAX:.4} rad");
    // the reference asks for 0.4 rad, beyond the limit
    let s = build_with("segway_lite", &[])?;
    for ctrl in [s.filter_on, s.filter_off] {
        let log = s.run_default(ctrl)?;
        let r = invariance_report(&log, 1e-3);
        println!("{ctrl:14} safe={:5} max |phi|={:.4}", r.safe, max_pitch(&log));
    }

    // a pitch-rate kick at t = 5 s
    let s = build_with("segway_lite", &[("kick_dphi", 1.5)])?;
    let log = s.run_default(s.filter_on)?;
    println!("kicked          safe={:5} max |phi|={:.4}", invariance_report(&log, 1e-3).safe, max_pitch(&log));

    // starting beyond the limit, the barrier pulls the pitch back
    let s = build_with("segway_lite", &[("phi0", PHI_MAX + 0.05)])?;
    let r = invariance_report(&s.run_default(s.filter_on)?, 1e-3);
    for b in &r.barriers {
        println!("{}: h(0)={:+.4} recovered at {:?}", b.name, b.initial_h, b.recovery_time);
    }
    Ok(())
}
