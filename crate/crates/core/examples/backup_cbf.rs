//! Barriers built from a backup controller: the safe set is whatever the
//! backup law can keep safe over a finite horizon. Braking compares the
//! barrier with the closed-form stopping margin; the Segway uses a
//! saturated balancing law as backup.
//!
//! cargo run --release --example backup_cbf

use nalgebra::DVector;

use cbf_core::backup::{backup_h_detailed, backup_h_gradient};
use cbf_core::scenarios::{braking, build_with};
use cbf_core::sim::invariance_report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = braking::defaults();
    let u_max = params.get("u_max");
    let b = braking::backup_barrier(&params)?;
    println!("{:>6} {:>6} {:>10} {:>10} {:>7} {:>16}", "p", "v", "h", "stop", "tau*", "grad h");
    for (p, v) in [(-1.0, 0.5), (0.0, 1.0), (0.5, 1.0), (0.9, 0.2), (0.0, -0.5)] {
        let x = DVector::from_column_slice(&[p, v]);
        let val = backup_h_detailed(&b, &x)?;
        let g = backup_h_gradient(&b, &x)?;
        println!(
            "{p:6.2} {v:6.2} {:+10.5} {:+10.5} {:7.2} [{:+.3}, {:+.3}]{}",
            val.h,
            braking::stopping_margin(&x, u_max),
            val.argmin_tau,
            g[0],
            g[1],
            if val.at_horizon { "  minimum at horizon" } else { "" }
        );
    }

    for name in ["braking", "segway_backup"] {
        let s = build_with(name, &[])?;
        for ctrl in [s.filter_on, s.filter_off] {
            let r = invariance_report(&s.run_default(ctrl)?, 1e-3);
            let mins: Vec<String> = r.barriers.iter().map(|b| format!("{}={:+.4}", b.name, b.min_h)).collect();
            println!("{name:14} {ctrl:14} safe={:5} {}", r.safe, mins.join(" "));
        }
    }
    Ok(())
}
