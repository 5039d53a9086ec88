//! Stepping stones: a planar double-integrator foot point `F` must stay
//! inside the disk `(O1, R1)` and outside the disk `(O2, R2)` while a
//! Lyapunov controller drives it to a goal. Both barriers have relative
//! degree 2 and are enforced as exponential barriers.
//!
//! State `(p_x, p_y, v_x, v_y)`, input the planar acceleration.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};

use super::{pd_lyapunov, positive, sym2_max_eig, vecf, ParamSet, Scenario};
use crate::certificate::{BarrierSpec, LyapunovSpec};
use crate::class_k::ExtendedClassKInf;
use crate::ecbf::{EcbfController, EcbfDesign, LieChain};
use crate::error::{Error, Result};
use crate::filters::{SafetyConstraint, SafetyFilter};
use crate::sim::{plant, Controller, Passthrough};
use crate::system::{ControlAffineSystem, ScalarField, VectorField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StonesParams {
    pub o1: [f64; 2],
    pub r1: f64,
    pub o2: [f64; 2],
    pub r2: f64,
}

const SINGULAR_DISTANCE: f64 = 1e-9;

/// Which side of a circle the foot must stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Inside,
    Outside,
}

fn split(x: &DVector<f64>, o: [f64; 2]) -> (Vector2<f64>, f64, Vector2<f64>) {
    let d = Vector2::new(x[0] - o[0], x[1] - o[1]);
    (d, d.norm(), Vector2::new(x[2], x[3]))
}

/// `(h, L_f h, L_f^2 h, L_g L_f h)` for `h = s (R - |p - O|)` with `s = +1`
/// inside and `-1` outside.
fn circle_chain(x: &DVector<f64>, o: [f64; 2], r: f64, side: Side) -> (f64, f64, f64, Vector2<f64>) {
    let s = if side == Side::Inside { 1.0 } else { -1.0 };
    let (d, dist, v) = split(x, o);
    let n = d / dist;
    let radial = n.dot(&v);
    (
        s * (r - dist),
        -s * radial,
        -s * (v.norm_squared() - radial * radial) / dist,
        -s * n,
    )
}

impl StonesParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r1 > self.r2 && self.r2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need R1 > R2 >= 0, got R1 = {}, R2 = {}",
                self.r1, self.r2
            )));
        }
        let dc = ((self.o1[0] - self.o2[0]).powi(2) + (self.o1[1] - self.o2[1]).powi(2)).sqrt();
        if dc + self.r2 >= self.r1 {
            return Err(Error::InvalidArgument("inner disk must lie strictly inside the outer one".into()));
        }
        Ok(())
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        for o in [self.o1, self.o2] {
            let distance = split(x, o).1;
            if distance < SINGULAR_DISTANCE {
                return Err(Error::SingularBarrierPoint { distance });
            }
        }
        Ok(())
    }

    /// `h1 = R1 - |F - O1|`.
    pub fn h1(&self, x: &DVector<f64>) -> f64 {
        self.r1 - split(x, self.o1).1
    }

    /// `h2 = |F - O2| - R2`.
    pub fn h2(&self, x: &DVector<f64>) -> f64 {
        split(x, self.o2).1 - self.r2
    }

    /// Both barrier values, or an error at a circle centre.
    pub fn barriers(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        self.check_point(x)?;
        Ok((self.h1(x), self.h2(x)))
    }

    fn chain(&self, which: usize) -> LieChain {
        let (o, r, side) = if which == 1 {
            (self.o1, self.r1, Side::Inside)
        } else {
            (self.o2, self.r2, Side::Outside)
        };
        let k = |f: fn((f64, f64, f64, Vector2<f64>)) -> f64| -> ScalarField {
            Arc::new(move |x: &DVector<f64>| f(circle_chain(x, o, r, side)))
        };
        let lglf: VectorField = Arc::new(move |x: &DVector<f64>| {
            let g = circle_chain(x, o, r, side).3;
            vecf(&[g[0], g[1]])
        });
        LieChain::new(vec![k(|c| c.0), k(|c| c.1), k(|c| c.2)], lglf).expect("three chain entries")
    }

    /// Relative-degree-2 chains of `h1` and `h2` for the double integrator.
    pub fn chains(&self) -> (LieChain, LieChain) {
        (self.chain(1), self.chain(2))
    }
}

/// Barrier values with their Lie chains; errors within `1e-9` of a centre.
pub fn stones_barriers(p: &StonesParams, x: &DVector<f64>) -> Result<(f64, f64, LieChain, LieChain)> {
    let (h1, h2) = p.barriers(x)?;
    let (c1, c2) = p.chains();
    Ok((h1, h2, c1, c2))
}

pub fn system() -> ControlAffineSystem {
    ControlAffineSystem::new(
        4,
        2,
        |x| vecf(&[x[2], x[3], 0.0, 0.0]),
        |_| DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
    )
}

pub fn defaults() -> ParamSet {
    ParamSet::new(&[
        ("o1_x", 0.0),
        ("o1_y", 0.0),
        ("r1", 1.0),
        ("o2_x", 0.0),
        ("o2_y", 0.0),
        ("r2", 0.6),
        ("start_x", -0.8),
        ("start_y", 0.0),
        ("goal_x", 0.75),
        ("goal_y", 0.15),
        ("kp", 1.0),
        ("kd", 2.0),
        ("clf_rate", 0.5),
        ("pole_1", 2.0),
        ("pole_2", 4.0),
        ("p_relax", 100.0),
        ("duration", 12.0),
        ("ctrl_dt", 0.001),
    ])
}

pub fn stones_params(p: &ParamSet) -> StonesParams {
    StonesParams {
        o1: [p.get("o1_x"), p.get("o1_y")],
        r1: p.get("r1"),
        o2: [p.get("o2_x"), p.get("o2_y")],
        r2: p.get("r2"),
    }
}

pub fn build(p: &ParamSet) -> Result<Scenario> {
    positive(p, &["kp", "kd", "clf_rate", "p_relax", "duration", "ctrl_dt"])?;
    let sp = stones_params(p);
    sp.validate()?;
    let sys = system();
    let x0 = vecf(&[p.get("start_x"), p.get("start_y"), 0.0, 0.0]);
    sp.check_point(&x0)?;

    let (c1, c2) = sp.chains();
    let poles = vec![p.get("pole_1"), p.get("pole_2")];
    let d1 = Arc::new(EcbfDesign::new(c1, poles.clone())?);
    let d2 = Arc::new(EcbfDesign::new(c2, poles)?);

    let goal = [p.get("goal_x"), p.get("goal_y")];
    let (kp, kd) = (p.get("kp"), p.get("kd"));
    let (a, b, c) = pd_lyapunov(kp, kd);
    // V decreases at rate >= 1/lambda_max(P) under the PD law
    let rate = p.get("clf_rate") / sym2_max_eig(a, b, c);
    let lyap = LyapunovSpec::new(
        move |x| {
            (0..2)
                .map(|i| {
                    let e = x[i] - goal[i];
                    a * e * e + 2.0 * b * e * x[i + 2] + c * x[i + 2] * x[i + 2]
                })
                .sum()
        },
        move |x| {
            let mut g = DVector::zeros(4);
            for i in 0..2 {
                let e = x[i] - goal[i];
                g[i] = 2.0 * a * e + 2.0 * b * x[i + 2];
                g[i + 2] = 2.0 * b * e + 2.0 * c * x[i + 2];
            }
            g
        },
        ExtendedClassKInf::linear(rate)?,
        vecf(&[goal[0], goal[1], 0.0, 0.0]),
    );

    let ecbf = EcbfController::new(sys.clone(), lyap.clone(), vec![d1.clone(), d2.clone()]).with_p_relax(p.get("p_relax"))?;
    let clf_only = ecbf.unified().without_constraints();
    let nominal: VectorField = Arc::new(move |x: &DVector<f64>| {
        vecf(&[
            -kp * (x[0] - goal[0]) - kd * x[2],
            -kp * (x[1] - goal[1]) - kd * x[3],
        ])
    });
    let rows: Vec<Arc<dyn SafetyConstraint>> = vec![d1.clone(), d2.clone()];
    let filter = SafetyFilter::from_constraints(sys.clone(), rows, nominal.clone());

    let grad_of = move |o: [f64; 2], s: f64| {
        move |x: &DVector<f64>| {
            let (d, dist, _) = split(x, o);
            vecf(&[-s * d[0] / dist, -s * d[1] / dist, 0.0, 0.0])
        }
    };
    let b1 = BarrierSpec::new(move |x| sp.h1(x), grad_of(sp.o1, 1.0), ExtendedClassKInf::linear(d1.k_alpha()[0])?);
    let b2 = BarrierSpec::new(move |x| sp.h2(x), grad_of(sp.o2, -1.0), ExtendedClassKInf::linear(d2.k_alpha()[0])?);

    let check_samples = (0..24)
        .map(|i| {
            let th = i as f64 * 0.27;
            let r = sp.r2 + (sp.r1 - sp.r2) * (0.1 + 0.8 * ((i * 7) % 24) as f64 / 23.0);
            vecf(&[
                sp.o2[0] + r * th.cos(),
                sp.o2[1] + r * th.sin(),
                0.5 * (1.3 * th).sin(),
                -0.4 * (0.7 * th).cos(),
            ])
        })
        .collect();

    let lyap_field: ScalarField = {
        let l = lyap.clone();
        Arc::new(move |x: &DVector<f64>| l.value(x))
    };
    let controllers: Vec<(&'static str, Arc<dyn Controller>)> = vec![
        ("clf_ecbf_qp", Arc::new(ecbf)),
        ("clf_qp", Arc::new(clf_only)),
        ("safety_filter", Arc::new(filter)),
        ("nominal", Arc::new(Passthrough::new(nominal, None))),
    ];
    Ok(Scenario {
        name: "stones",
        plant: plant(
            sys,
            vec![("h1".into(), b1.value_field()), ("h2".into(), b2.value_field())],
            Some(lyap_field),
        ),
        x0,
        duration: p.get("duration"),
        ctrl_dt: p.get("ctrl_dt"),
        sim_substeps: 1,
        barriers: vec![("h1".into(), b1), ("h2".into(), b2)],
        lyapunov: Some(lyap),
        designs: vec![d1, d2],
        check_samples,
        controllers,
        filter_on: "clf_ecbf_qp",
        filter_off: "clf_qp",
        params: p.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecbf::{ecbf_constraint_row, eta_b, validate_initial_state, InitialStateVerdict};

    fn sp() -> StonesParams {
        stones_params(&defaults())
    }

    #[test]
    fn mid_radius_values_are_symmetric() {
        let p = sp();
        let mid = 0.5 * (p.r1 + p.r2);
        let x = vecf(&[0.0, mid, 0.0, 0.0]);
        let (h1, h2) = p.barriers(&x).unwrap();
        assert!((h1 - (p.r1 - p.r2) / 2.0).abs() < 1e-15);
        assert!((h2 - (p.r1 - p.r2) / 2.0).abs() < 1e-15);
        let (c1, _) = p.chains();
        assert_eq!(eta_b(&c1, &x).as_slice(), &[h1, 0.0]);
    }

    #[test]
    fn centre_is_singular() {
        let err = stones_barriers(&sp(), &vecf(&[0.0, 0.0, 1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::SingularBarrierPoint { .. }));
    }

    #[test]
    fn second_derivative_matches_forced_flow() {
        let p = sp();
        let (c1, c2) = p.chains();
        let sys = system();
        let x = vecf(&[0.3, -0.65, 0.4, 0.7]);
        let u = vecf(&[-0.8, 0.5]);
        for (chain, h) in [(&c1, p.h1(&x)), (&c2, p.h2(&x))] {
            // h(t) along xdot = f + g u, second difference over a short step
            let s = 1e-4;
            let flow = |t: f64| {
                let steps = 10;
                let mut y = x.clone();
                for _ in 0..steps {
                    y = crate::sim::rk4_step(&sys, &y, &u, t / steps as f64).unwrap();
                }
                chain.h(&y)
            };
            let hdd = (flow(s) - 2.0 * h + flow(-s)) / (s * s);
            let analytic = chain.lf_power(2, &x) + chain.lglf(&x).dot(&u);
            assert!((hdd - analytic).abs() < 1e-3 * analytic.abs().max(1.0), "{hdd} vs {analytic}");
        }
    }

    #[test]
    fn row_is_two_term_exponential_form() {
        let s = build(&defaults()).unwrap();
        let d = &s.designs[0];
        let x = vecf(&[0.1, 0.85, -0.2, 0.3]);
        let (a, b) = ecbf_constraint_row(d, &x).unwrap();
        let (a1, a2) = (d.k_alpha()[0], d.k_alpha()[1]);
        let want = -d.chain.lf_power(2, &x) - a1 * d.chain.h(&x) - a2 * d.chain.lf_power(1, &x);
        assert!((b - want).abs() < 1e-14);
        assert_eq!(a, d.chain.lglf(&x));
        assert_eq!(d.k_alpha().as_slice(), &[8.0, 6.0]);
    }

    #[test]
    fn start_state_is_valid() {
        let s = build(&defaults()).unwrap();
        for d in &s.designs {
            assert_eq!(validate_initial_state(d, &s.x0).unwrap(), InitialStateVerdict::Valid);
        }
    }

    #[test]
    fn gradients_and_chains_are_consistent() {
        let s = build(&defaults()).unwrap();
        let report = s.check().unwrap();
        assert!(report.pass(), "{report:?}");
    }

    #[test]
    fn rejects_degenerate_geometry() {
        let p = defaults().with("r2", 1.2).unwrap();
        assert!(build(&p).is_err());
        let p = defaults().with("o2_x", 0.5).unwrap();
        assert!(build(&p).is_err());
    }
}
