//! Solve small dense QPs with the active-set solver and the closed-form
//! half-space projection, and read back duals and KKT residuals.
//!
//! cargo run --example qp_solver

use nalgebra::{DMatrix, DVector};

use cbf_core::qp::{solve_active_set, solve_minnorm_single, QpProblem};
use cbf_core::system::Bound;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // min 1/2 |z - (2, 1)|^2  s.t.  z0 + z1 <= 2, z0 >= 0, |z1| <= 0.8
    let h = DMatrix::identity(2, 2);
    let c = DVector::from_column_slice(&[-2.0, -1.0]);
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 0.0]);
    let b = DVector::from_column_slice(&[-2.0, 0.0]);
    let p = QpProblem::new(h, c)
        .with_constraints(a, b)
        .with_bounds(vec![Bound::unbounded(), Bound::symmetric(0.8)]);
    let sol = solve_active_set(&p)?;
    println!("status      {}", sol.status.as_str());
    println!("z*          {:?}", sol.z_star.as_slice());
    println!("objective   {:.6}", p.objective(&sol.z_star));
    println!("active set  {:?}", sol.active_set);
    println!("duals       {:?}", sol.duals.as_slice());
    println!("kkt         {:.2e}", sol.kkt_residual);

    // contradictory rows are reported, not solved
    let bad = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_constraints(
        DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        DVector::from_column_slice(&[1.0, 0.0]),
    );
    println!("z >= 1, z <= 0: {}", solve_active_set(&bad)?.status.as_str());

    // one row, no bounds: projection of u onto {a . z >= b}
    let u = DVector::from_column_slice(&[1.0, -1.0]);
    let row = DVector::from_column_slice(&[0.0, 1.0]);
    let z = solve_minnorm_single(&u, &row, 0.5)?;
    println!("projection of {:?} onto z1 >= 0.5: {:?}", u.as_slice(), z.as_slice());
    Ok(())
}
