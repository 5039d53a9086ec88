//! Closed-loop simulation: zero-order-hold control at `ctrl_dt`, fixed-step
//! RK4 substeps, instantaneous state kicks, trajectory logging to CSV and
//! invariance reporting.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ecbf::EcbfController;
use crate::error::{Error, Result};
use crate::filters::{FilterPath, SafetyFilter, UnifiedController};
use crate::system::{Bound, ControlAffineSystem, ScalarField, VectorField};

/// Classical RK4 step of `xdot = f(x) + g(x) u` with `u` held constant.
pub fn rk4_step(sys: &ControlAffineSystem, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    let diverged = |e: Error| match e {
        Error::NumericalFailure { .. } => Error::DivergedState { norm: x.norm() },
        other => other,
    };
    let k1 = sys.dynamics(x, u).map_err(diverged)?;
    let k2 = sys.dynamics(&(x + &k1 * (0.5 * dt)), u).map_err(diverged)?;
    let k3 = sys.dynamics(&(x + &k2 * (0.5 * dt)), u).map_err(diverged)?;
    let k4 = sys.dynamics(&(x + &k3 * dt), u).map_err(diverged)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergedState { norm: next.norm() });
    }
    Ok(next)
}

/// What a controller produced at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u_des: DVector<f64>,
    pub u_act: DVector<f64>,
    /// CLF relaxation, when the controller has one.
    pub delta: Option<f64>,
    /// `passthrough`, `closed_form`, `optimal`, `nominal` or `clf_qp`.
    pub qp_status: &'static str,
    pub active_set: Vec<usize>,
    /// Whether `u_des` already satisfied every safety row.
    pub nominal_safe: Option<bool>,
}

impl ControlOutput {
    pub fn perturbation(&self) -> f64 {
        (&self.u_act - &self.u_des).norm()
    }
}

pub trait Controller: Send + Sync {
    fn control(&self, x: &DVector<f64>) -> Result<ControlOutput>;
}

/// Nominal feedback applied as is, clipped to the input box.
#[derive(Clone)]
pub struct Passthrough {
    nominal: VectorField,
    input_box: Option<Vec<Bound>>,
}

impl fmt::Debug for Passthrough {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Passthrough").field("input_box", &self.input_box).finish_non_exhaustive()
    }
}

impl Passthrough {
    pub fn new(nominal: VectorField, input_box: Option<Vec<Bound>>) -> Self {
        Self { nominal, input_box }
    }
}

impl Controller for Passthrough {
    fn control(&self, x: &DVector<f64>) -> Result<ControlOutput> {
        let u_des = (self.nominal)(x);
        let mut u_act = u_des.clone();
        if let Some(b) = &self.input_box {
            for (u, b) in u_act.iter_mut().zip(b) {
                *u = b.clamp(*u);
            }
        }
        Ok(ControlOutput {
            u_des,
            u_act,
            delta: None,
            qp_status: "nominal",
            active_set: Vec::new(),
            nominal_safe: None,
        })
    }
}

impl Controller for SafetyFilter {
    fn control(&self, x: &DVector<f64>) -> Result<ControlOutput> {
        let (u_act, d) = self.filter(x)?;
        Ok(ControlOutput {
            u_act,
            delta: None,
            qp_status: match d.path {
                FilterPath::Passthrough => "passthrough",
                FilterPath::ClosedForm => "closed_form",
                FilterPath::ActiveSet => "optimal",
            },
            active_set: d.active_set,
            nominal_safe: Some(d.nominal_safe),
            u_des: d.u_des,
        })
    }
}

impl Controller for UnifiedController {
    fn control(&self, x: &DVector<f64>) -> Result<ControlOutput> {
        let out = self.solve(x)?;
        Ok(ControlOutput {
            u_des: out.u.clone(),
            u_act: out.u,
            delta: Some(out.delta),
            qp_status: if self.constraints().is_empty() { "clf_qp" } else { "optimal" },
            active_set: out.active_set,
            nominal_safe: None,
        })
    }
}

impl Controller for EcbfController {
    fn control(&self, x: &DVector<f64>) -> Result<ControlOutput> {
        self.unified().control(x)
    }
}

/// Instantaneous state increment applied at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kick {
    pub t: f64,
    pub dx: DVector<f64>,
}

/// The simulated plant together with the quantities logged at every step.
#[derive(Clone)]
pub struct Plant {
    pub sys: ControlAffineSystem,
    pub barrier_names: Vec<String>,
    pub barriers: Vec<ScalarField>,
    pub lyapunov: Option<ScalarField>,
    pub kicks: Vec<Kick>,
}

impl fmt::Debug for Plant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plant")
            .field("sys", &self.sys)
            .field("barrier_names", &self.barrier_names)
            .field("kicks", &self.kicks)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ctrl_dt: f64,
    pub sim_substeps: usize,
    pub duration: f64,
    pub x0: DVector<f64>,
    pub seed: u64,
    /// Standard deviation of a random state increment added after every
    /// control period; zero disables it.
    pub process_noise: f64,
}

impl RunConfig {
    pub fn new(x0: DVector<f64>, duration: f64) -> Self {
        Self {
            ctrl_dt: 1e-3,
            sim_substeps: 1,
            duration,
            x0,
            seed: 0,
            process_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ctrl_dt > 0.0 && self.ctrl_dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("ctrl_dt must be positive, got {}", self.ctrl_dt)));
        }
        if self.sim_substeps == 0 {
            return Err(Error::InvalidArgument("sim_substeps must be at least 1".into()));
        }
        if !(self.duration >= self.ctrl_dt && self.duration.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "duration {} must be at least ctrl_dt {}",
                self.duration, self.ctrl_dt
            )));
        }
        if !(self.process_noise >= 0.0 && self.process_noise.is_finite()) {
            return Err(Error::InvalidArgument("process_noise must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x: DVector<f64>,
    pub u_des: DVector<f64>,
    pub u_act: DVector<f64>,
    pub h: Vec<f64>,
    /// NaN when the run has no Lyapunov function.
    pub v: f64,
    /// NaN when the controller has no relaxation.
    pub delta: f64,
    pub qp_status: String,
    pub active_set: Vec<usize>,
    pub perturbation: f64,
    pub nominal_safe: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// The safety program had no solution (invalid barrier at that state).
    Safety,
    /// Non-finite or diverging numbers.
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub kind: FailureKind,
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub n: usize,
    pub m: usize,
    pub barrier_names: Vec<String>,
    pub rows: Vec<LogRow>,
    pub failure: Option<Failure>,
}

fn classify(e: &Error) -> FailureKind {
    match e {
        Error::InfeasiblePointwise { .. }
        | Error::NotAClfHere { .. }
        | Error::RelativeDegreeViolation { .. }
        | Error::OutsideSafeSet { .. } => FailureKind::Safety,
        _ => FailureKind::Numerical,
    }
}

/// Simulate `controller` on `plant` from `cfg.x0`. Controller failures and
/// diverging states end the log early with a failure marker.
pub fn run_closed_loop(plant: &Plant, controller: &dyn Controller, cfg: &RunConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let sys = &plant.sys;
    if cfg.x0.len() != sys.n() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: sys.n(),
            got: cfg.x0.len(),
        });
    }
    let steps = (cfg.duration / cfg.ctrl_dt).round() as usize;
    let h_sub = cfg.ctrl_dt / cfg.sim_substeps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = if cfg.process_noise > 0.0 {
        Some(Normal::new(0.0, cfg.process_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut kicks: Vec<&Kick> = plant.kicks.iter().collect();
    kicks.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut next_kick = 0;

    let mut log = TrajectoryLog {
        n: sys.n(),
        m: sys.m(),
        barrier_names: plant.barrier_names.clone(),
        rows: Vec::with_capacity(steps + 1),
        failure: None,
    };
    let mut x = cfg.x0.clone();
    for k in 0..=steps {
        let t = k as f64 * cfg.ctrl_dt;
        while next_kick < kicks.len() && kicks[next_kick].t <= t + 1e-9 * cfg.ctrl_dt {
            x += &kicks[next_kick].dx;
            next_kick += 1;
        }
        let out = match controller.control(&x) {
            Ok(o) => o,
            Err(e) => {
                log.failure = Some(Failure {
                    kind: classify(&e),
                    t,
                    message: e.to_string(),
                });
                break;
            }
        };
        log.rows.push(LogRow {
            t,
            h: plant.barriers.iter().map(|h| h(&x)).collect(),
            v: plant.lyapunov.as_ref().map_or(f64::NAN, |v| v(&x)),
            delta: out.delta.unwrap_or(f64::NAN),
            qp_status: out.qp_status.to_string(),
            perturbation: out.perturbation(),
            active_set: out.active_set.clone(),
            nominal_safe: out.nominal_safe,
            x: x.clone(),
            u_des: out.u_des,
            u_act: out.u_act.clone(),
        });
        if k == steps {
            break;
        }
        let mut step_err = None;
        for _ in 0..cfg.sim_substeps {
            match rk4_step(sys, &x, &out.u_act, h_sub) {
                Ok(nx) => x = nx,
                Err(e) => {
                    step_err = Some(e);
                    break;
                }
            }
        }
        if let Some(n) = &noise {
            for v in x.iter_mut() {
                *v += n.sample(&mut rng);
            }
        }
        let err = step_err.or_else(|| (x.norm() > 1e9).then(|| Error::DivergedState { norm: x.norm() }));
        if let Some(e) = err {
            log.failure = Some(Failure {
                kind: FailureKind::Numerical,
                t: t + cfg.ctrl_dt,
                message: e.to_string(),
            });
            break;
        }
    }
    Ok(log)
}

impl TrajectoryLog {
    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..self.n).map(|i| format!("x{i}")));
        cols.extend((0..self.m).map(|i| format!("u_des{i}")));
        cols.extend((0..self.m).map(|i| format!("u_act{i}")));
        cols.extend((0..self.barrier_names.len()).map(|i| format!("h_{i}")));
        for c in ["V", "delta", "qp_status", "active_set", "perturbation"] {
            cols.push(c.to_string());
        }
        cols
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
        out.write_record(self.header()).map_err(io)?;
        let f = |v: f64| format!("{v:.16e}");
        for r in &self.rows {
            let mut rec = vec![f(r.t)];
            rec.extend(r.x.iter().map(|v| f(*v)));
            rec.extend(r.u_des.iter().map(|v| f(*v)));
            rec.extend(r.u_act.iter().map(|v| f(*v)));
            rec.extend(r.h.iter().map(|v| f(*v)));
            rec.push(f(r.v));
            rec.push(f(r.delta));
            rec.push(r.qp_status.clone());
            rec.push(r.active_set.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"));
            rec.push(f(r.perturbation));
            out.write_record(&rec).map_err(io)?;
        }
        out.flush().map_err(|e| Error::InvalidArgument(format!("csv write failed: {e}")))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| std::io::Error::other(e.to_string()))
    }

    /// Reload a log written by [`TrajectoryLog::write_csv`]. Barrier names
    /// and the failure marker are not part of the CSV and come back as
    /// `h_i` / `None`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("malformed trajectory csv: {msg}"));
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|c| c.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
                .count()
        };
        let (n, m, nh) = (count("x"), count("u_des"), count("h_"));
        let expected = 1 + n + 2 * m + nh + 5;
        if header.len() != expected {
            return Err(bad(format!("expected {expected} columns, found {}", header.len())));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| bad(format!("missing column {i}")))?
                    .parse::<f64>()
                    .map_err(|e| bad(e.to_string()))
            };
            let vec_at = |start: usize, len: usize| -> Result<DVector<f64>> {
                Ok(DVector::from_vec((start..start + len).map(num).collect::<Result<Vec<_>>>()?))
            };
            let mut c = 1;
            let x = vec_at(c, n)?;
            c += n;
            let u_des = vec_at(c, m)?;
            c += m;
            let u_act = vec_at(c, m)?;
            c += m;
            let h = vec_at(c, nh)?.iter().copied().collect();
            c += nh;
            let active = &rec[c + 3];
            rows.push(LogRow {
                t: num(0)?,
                x,
                u_des,
                u_act,
                h,
                v: num(c)?,
                delta: num(c + 1)?,
                qp_status: rec[c + 2].to_string(),
                active_set: if active.is_empty() {
                    Vec::new()
                } else {
                    active
                        .split(';')
                        .map(|s| s.parse::<usize>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<Vec<_>>>()?
                },
                perturbation: num(c + 4)?,
                nominal_safe: None,
            });
        }
        Ok(Self {
            n,
            m,
            barrier_names: (0..nh).map(|i| format!("h_{i}")).collect(),
            rows,
            failure: None,
        })
    }

    pub fn min_h(&self, i: usize) -> f64 {
        self.rows.iter().map(|r| r.h[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn deltas(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.delta).filter(|d| !d.is_nan())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierReport {
    pub name: String,
    pub min_h: f64,
    pub initial_h: f64,
    /// First logged time with `h < -tol`.
    pub first_violation: Option<f64>,
    /// For runs starting outside, the first time `h >= 0`.
    pub recovery_time: Option<f64>,
    pub safe: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    pub tol: f64,
    pub barriers: Vec<BarrierReport>,
    pub safe: bool,
    pub max_perturbation: f64,
    pub mean_active_set: f64,
    pub failure: Option<Failure>,
}

/// Forward-invariance verdict for every logged barrier. A barrier starting
/// inside is safe iff it never drops below `-tol`; one starting outside is
/// safe iff it reaches `h >= 0` and stays above `-tol` from then on. Any
/// failure marker makes the run unsafe.
pub fn invariance_report(log: &TrajectoryLog, tol: f64) -> InvarianceReport {
    let barriers = (0..log.barrier_names.len())
        .map(|i| {
            let initial_h = log.rows.first().map_or(f64::NAN, |r| r.h[i]);
            let first_violation = log.rows.iter().find(|r| !(r.h[i] >= -tol)).map(|r| r.t);
            let (recovery_time, safe) = if initial_h >= 0.0 {
                (None, first_violation.is_none())
            } else {
                match log.rows.iter().position(|r| r.h[i] >= 0.0) {
                    Some(k) => (
                        Some(log.rows[k].t),
                        log.rows[k..].iter().all(|r| r.h[i] >= -tol),
                    ),
                    None => (None, false),
                }
            };
            BarrierReport {
                name: log.barrier_names[i].clone(),
                min_h: log.min_h(i),
                initial_h,
                first_violation,
                recovery_time,
                safe,
            }
        })
        .collect::<Vec<_>>();
    let rows = log.rows.len().max(1) as f64;
    InvarianceReport {
        tol,
        safe: log.failure.is_none() && barriers.iter().all(|b| b.safe),
        barriers,
        max_perturbation: log.rows.iter().map(|r| r.perturbation).fold(0.0, f64::max),
        mean_active_set: log.rows.iter().map(|r| r.active_set.len() as f64).sum::<f64>() / rows,
        failure: log.failure.clone(),
    }
}

/// Convenience for building a [`Plant`].
pub fn plant(sys: ControlAffineSystem, barriers: Vec<(String, ScalarField)>, lyapunov: Option<ScalarField>) -> Plant {
    let (barrier_names, barriers) = barriers.into_iter().unzip();
    Plant {
        sys,
        barrier_names,
        barriers,
        lyapunov,
        kicks: Vec::new(),
    }
}

pub fn shared<C: Controller + 'static>(c: C) -> Arc<dyn Controller> {
    Arc::new(c)
}
