//! The reduced (u, delta) program with mu eliminated must match the full
//! program over (u, mu, delta) solved directly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbf_core::certificate::LyapunovSpec;
use cbf_core::class_k::ExtendedClassKInf;
use cbf_core::ecbf::{clf_ecbf_qp, eta_b, EcbfController, EcbfDesign, LieChain};
use cbf_core::system::{ControlAffineSystem, ScalarField, VectorField};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

/// Double integrator with `h = 1 - x1` and a quadratic CLF about the origin.
fn setup(p_relax: f64) -> (ControlAffineSystem, LyapunovSpec, Arc<EcbfDesign>, EcbfController) {
    let sys = ControlAffineSystem::new(2, 1, |x| v(&[x[1], 0.0]), |_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
    let h: ScalarField = Arc::new(|x: &DVector<f64>| 1.0 - x[0]);
    let lf: ScalarField = Arc::new(|x: &DVector<f64>| -x[1]);
    let lf2: ScalarField = Arc::new(|_: &DVector<f64>| 0.0);
    let lglf: VectorField = Arc::new(|_: &DVector<f64>| v(&[-1.0]));
    let design = Arc::new(EcbfDesign::new(LieChain::new(vec![h, lf, lf2], lglf).unwrap(), vec![1.0, 2.0]).unwrap());
    // P solves A'P + PA = -I for the PD loop kp = 1, kd = 2
    let lyap = LyapunovSpec::new(
        |x| 1.5 * x[0] * x[0] + x[0] * x[1] + 0.5 * x[1] * x[1],
        |x| v(&[3.0 * x[0] + x[1], x[0] + x[1]]),
        ExtendedClassKInf::Linear(0.5),
        v(&[0.0, 0.0]),
    );
    let ctrl = EcbfController::new(sys.clone(), lyap.clone(), vec![design.clone()]).with_p_relax(p_relax).unwrap();
    (sys, lyap, design, ctrl)
}

/// Full program over z = (u, mu, delta), solved by enumerating which of the
/// two inequalities are active and solving the KKT system exactly:
///
/// min 1/2 u^2 + p delta^2
/// s.t. -LgV u + delta >= LfV + gamma(V), mu >= -K eta, mu = Lf^2 h + LgLf h u.
fn full_program(
    sys: &ControlAffineSystem,
    lyap: &LyapunovSpec,
    design: &EcbfDesign,
    p_relax: f64,
    x: &DVector<f64>,
) -> DVector<f64> {
    let grad_v = lyap.gradient(x);
    let lfv = grad_v.dot(&sys.drift(x).unwrap());
    let lgv = (grad_v.transpose() * sys.input_matrix(x).unwrap())[0];
    let a_mu = design.chain.lglf(x)[0];
    let lf2 = design.chain.lf_power(2, x);
    let k_eta = design.k_alpha().dot(&eta_b(&design.chain, x));
    let h = DMatrix::from_diagonal(&v(&[1.0, 0.0, 2.0 * p_relax]));
    let ineq_a = DMatrix::from_row_slice(2, 3, &[-lgv, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let ineq_b = v(&[lfv + lyap.decay(x), -k_eta]);
    let (eq_a, eq_b) = (v(&[a_mu, -1.0, 0.0]), -lf2);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0..4usize {
        let active: Vec<usize> = (0..2).filter(|i| mask & (1 << i) != 0).collect();
        let k = 1 + active.len();
        // [H -C'; C 0] [z; lambda] = [0; d] with C the equality plus active rows
        let mut kkt = DMatrix::zeros(3 + k, 3 + k);
        let mut rhs = DVector::zeros(3 + k);
        kkt.view_mut((0, 0), (3, 3)).copy_from(&h);
        let mut rows = vec![(eq_a.transpose(), eq_b)];
        rows.extend(active.iter().map(|&i| (ineq_a.row(i).into_owned(), ineq_b[i])));
        for (j, (row, d)) in rows.iter().enumerate() {
            for c in 0..3 {
                kkt[(3 + j, c)] = row[c];
                kkt[(c, 3 + j)] = -row[c];
            }
            rhs[3 + j] = *d;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, 3).into_owned();
        let duals_ok = (1..k).all(|j| sol[3 + j] >= -1e-12);
        let primal_ok = (0..2).all(|i| ineq_a.row(i).dot(&z.transpose()) >= ineq_b[i] - 1e-12);
        if duals_ok && primal_ok {
            let cost = 0.5 * z[0] * z[0] + p_relax * z[2] * z[2];
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, z));
            }
        }
    }
    best.expect("KKT point").1
}

#[test]
fn eliminated_program_matches_full_program() {
    let p_relax = 10.0;
    let (sys, lyap, design, ctrl) = setup(p_relax);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let x = v(&[rng.random_range(-1.0..0.95), rng.random_range(-2.0..2.0)]);
        let (u, mu, delta) = clf_ecbf_qp(&ctrl, &x).unwrap();
        let z = full_program(&sys, &lyap, &design, p_relax, &x);
        worst = worst.max((u[0] - z[0]).abs());
        assert!((delta - z[2]).abs() < 1e-7, "delta {delta} vs {}", z[2]);
        assert!((mu[0] - z[1]).abs() < 1e-7, "mu {} vs {}", mu[0], z[1]);
    }
    assert!(worst <= 1e-8, "max |du| {worst:e}");
}

#[test]
fn boundary_approach_makes_mu_row_active() {
    let (_, _, design, ctrl) = setup(100.0);
    // moving fast towards the wall: the barrier row binds
    let x = v(&[0.8, 1.5]);
    let out = ctrl.solve(&x).unwrap();
    let k_eta = design.k_alpha().dot(&eta_b(&design.chain, &x));
    assert!((out.mu[0] + k_eta).abs() < 1e-9, "mu {} vs {}", out.mu[0], -k_eta);
}
