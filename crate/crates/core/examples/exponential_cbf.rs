//! Exponential barriers for relative degree two: pole placement, the
//! initial-state check and the exponential lower bound, on the stepping
//! stones scenario.
//!
//! cargo run --release --example exponential_cbf

use cbf_core::ecbf::{eta_b, exponential_bound, gains_from_poles, validate_initial_state};
use cbf_core::scenarios::build_with;
use cbf_core::sim::invariance_report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for poles in [[1.0, 2.0], [2.0, 4.0], [5.0, 10.0]] {
        println!("poles {poles:?} -> K = {:?}", gains_from_poles(&poles)?.as_slice());
    }

    let s = build_with("stones", &[])?;
    for (i, d) in s.designs.iter().enumerate() {
        println!(
            "barrier {i}: h(x0)={:+.3} initial state {:?}",
            d.chain.h(&s.x0),
            validate_initial_state(d, &s.x0)?
        );
    }

    // faster poles let the foot approach the rims more closely
    for (p1, p2) in [(1.0, 2.0), (2.0, 4.0), (4.0, 8.0)] {
        let s = build_with("stones", &[("pole_1", p1), ("pole_2", p2)])?;
        let log = s.run_default(s.filter_on)?;
        let r = invariance_report(&log, 1e-3);
        let mins: Vec<String> = r.barriers.iter().map(|b| format!("{}={:+.4}", b.name, b.min_h)).collect();
        let last = log.rows.last().expect("nonempty log");
        println!("poles ({p1}, {p2}): safe={} {} final V={:.2e}", r.safe, mins.join(" "), last.v);
    }

    // along the run h(t) stays above the bound predicted from eta(0)
    let log = s.run_default(s.filter_on)?;
    for (i, d) in s.designs.iter().enumerate() {
        let eta0 = eta_b(&d.chain, &s.x0);
        let worst = log
            .rows
            .iter()
            .map(|r| r.h[i] - exponential_bound(d, &eta0, r.t))
            .fold(f64::INFINITY, f64::min);
        println!("barrier {i}: min over t of h(t) - bound(t) = {worst:+.3e}");
    }

    let off = invariance_report(&s.run_default(s.filter_off)?, 1e-3);
    println!("without barriers: safe={}", off.safe);
    Ok(())
}
