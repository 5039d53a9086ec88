//! Run every shipped scenario with and without its safety layer and print
//! the minimum of each barrier.
//!
//! cargo run --release --example scenario_tour

use std::time::Instant;

use cbf_core::scenarios::{build, default_params, SCENARIOS};
use cbf_core::sim::invariance_report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in SCENARIOS {
        let s = build(name, &default_params(name)?)?;
        for ctrl in [s.filter_on, s.filter_off] {
            let start = Instant::now();
            let log = s.run_default(ctrl)?;
            let report = invariance_report(&log, 1e-3);
            let mins: Vec<String> = report
                .barriers
                .iter()
                .map(|b| format!("{}={:+.4}", b.name, b.min_h))
                .collect();
            println!(
                "{name:14} {ctrl:14} safe={:5} {} max|du|={:.3} ({:.2}s){}",
                report.safe,
                mins.join(" "),
                report.max_perturbation,
                start.elapsed().as_secs_f64(),
                log.failure.as_ref().map(|f| format!(" failure at {:.3}: {}", f.t, f.message)).unwrap_or_default()
            );
        }
    }
    Ok(())
}
