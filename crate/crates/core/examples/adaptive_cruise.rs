//! Adaptive cruise control with lane keeping: follow a decelerating lead
//! car at a safe headway while steering towards a lateral target.
//!
//! cargo run --release --example adaptive_cruise

use cbf_core::scenarios::build_with;
use cbf_core::sim::invariance_report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = build_with("acc_lk", &[])?;
    println!("controllers: {}", s.controller_names().join(", "));

    let log = s.run_default(s.filter_on)?;
    println!("{:>5} {:>8} {:>8} {:>7} {:>8} {:>8}", "t", "v_f", "gap", "y", "h_hw", "delta");
    for r in log.rows.iter().step_by(200) {
        println!(
            "{:5.1} {:8.3} {:8.3} {:7.3} {:+8.3} {:8.4}",
            r.t,
            r.x[1],
            r.x[4] - r.x[0],
            r.x[2],
            r.h[0],
            r.delta
        );
    }

    for ctrl in [s.filter_on, s.filter_off] {
        let r = invariance_report(&s.run_default(ctrl)?, 1e-3);
        let mins: Vec<String> = r.barriers.iter().map(|b| format!("{}={:+.4}", b.name, b.min_h)).collect();
        println!("{ctrl:12} safe={:5} {}", r.safe, mins.join(" "));
    }

    // a longer headway costs speed tracking, visible in the relaxation
    for tau in [1.2, 1.8, 2.4] {
        let s = build_with("acc_lk", &[("tau_headway", tau)])?;
        let log = s.run_default(s.filter_on)?;
        let n = log.deltas().count().max(1) as f64;
        let last = log.rows.last().expect("nonempty log");
        println!(
            "tau_headway={tau}: mean delta={:.3} final gap={:.2} final speed={:.2}",
            log.deltas().sum::<f64>() / n,
            last.x[4] - last.x[0],
            last.x[1]
        );
    }
    Ok(())
}
