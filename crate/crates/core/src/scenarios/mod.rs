//! Shipped simulation scenarios. Each one bundles a plant, its barriers and
//! Lyapunov function, a set of named controllers and default run settings,
//! all driven by a flat table of named parameters.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::certificate::{check_gradient_consistency, BarrierSpec, GradientReport, LyapunovSpec};
use crate::ecbf::{ChainReport, EcbfDesign};
use crate::error::{Error, Result};
use crate::sim::{run_closed_loop, Controller, Plant, RunConfig, TrajectoryLog};

pub mod acc;
pub mod braking;
pub mod segway;
pub mod stones;

/// Registered scenario names.
pub const SCENARIOS: &[&str] = &["acc_lk", "stones", "segway_lite", "segway_backup", "braking"];

/// Ordered table of named scalar parameters with fixed key set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(&'static str, f64)>,
}

impl ParamSet {
    pub fn new(defaults: &[(&'static str, f64)]) -> Self {
        Self {
            entries: defaults.to_vec(),
        }
    }

    /// Panics on unknown names: builders only read their own keys.
    pub fn get(&self, name: &str) -> f64 {
        self.entries
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("unknown scenario parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(k, _)| *k == name)
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("parameter {name} must be finite, got {value}")));
        }
        match self.entries.iter_mut().find(|(k, _)| *k == name) {
            Some(e) => {
                e.1 = value;
                Ok(())
            }
            None => Err(Error::InvalidArgument(match nearest(name, self.names()) {
                Some(s) => format!("unknown parameter {name} (did you mean {s}?)"),
                None => format!("unknown parameter {name}"),
            })),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Result<Self> {
        self.set(name, value)?;
        Ok(self)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(k, _)| *k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        self.entries.iter().copied()
    }
}

/// Closest candidate by edit distance, if any is reasonably close.
pub fn nearest<'a, I: IntoIterator<Item = &'a str>>(name: &str, candidates: I) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (strsim::damerau_levenshtein(name, c), c))
        .filter(|(d, c)| *d <= (c.len().max(name.len()) / 2).max(2))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

/// A ready-to-run scenario.
pub struct Scenario {
    pub name: &'static str,
    pub params: ParamSet,
    pub plant: Plant,
    pub x0: DVector<f64>,
    pub duration: f64,
    pub ctrl_dt: f64,
    pub sim_substeps: usize,
    /// Barriers with analytic gradients, for consistency checks.
    pub barriers: Vec<(String, BarrierSpec)>,
    pub lyapunov: Option<LyapunovSpec>,
    pub designs: Vec<Arc<EcbfDesign>>,
    /// States at which gradients and Lie chains are checked.
    pub check_samples: Vec<DVector<f64>>,
    controllers: Vec<(&'static str, Arc<dyn Controller>)>,
    /// Controller with the safety layer active.
    pub filter_on: &'static str,
    /// Same objective with the safety layer removed.
    pub filter_off: &'static str,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("x0", &self.x0.as_slice())
            .field("controllers", &self.controller_names())
            .finish_non_exhaustive()
    }
}

impl Scenario {
    pub fn controller_names(&self) -> Vec<&'static str> {
        self.controllers.iter().map(|(n, _)| *n).collect()
    }

    pub fn controller(&self, name: &str) -> Result<Arc<dyn Controller>> {
        self.controllers
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, c)| c.clone())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "scenario {} has no controller {name}; available: {}",
                    self.name,
                    self.controller_names().join(", ")
                ))
            })
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            ctrl_dt: self.ctrl_dt,
            sim_substeps: self.sim_substeps,
            duration: self.duration,
            x0: self.x0.clone(),
            seed: 0,
            process_noise: 0.0,
        }
    }

    pub fn run(&self, controller: &str, cfg: &RunConfig) -> Result<TrajectoryLog> {
        run_closed_loop(&self.plant, self.controller(controller)?.as_ref(), cfg)
    }

    /// Run with the default configuration.
    pub fn run_default(&self, controller: &str) -> Result<TrajectoryLog> {
        self.run(controller, &self.run_config())
    }

    /// Gradient and Lie-chain consistency over the check samples.
    pub fn check(&self) -> Result<CheckReport> {
        let mut gradients: Vec<(String, GradientReport)> = self
            .barriers
            .iter()
            .map(|(n, b)| (n.clone(), check_gradient_consistency(b, &self.check_samples)))
            .collect();
        if let Some(v) = &self.lyapunov {
            gradients.push(("V".into(), check_gradient_consistency(v, &self.check_samples)));
        }
        let chains = self
            .designs
            .iter()
            .enumerate()
            .map(|(i, d)| Ok((format!("chain_{i}"), d.chain.check_consistency(&self.plant.sys, &self.check_samples)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CheckReport { gradients, chains })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub gradients: Vec<(String, GradientReport)>,
    pub chains: Vec<(String, ChainReport)>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.gradients.iter().all(|(_, g)| g.pass) && self.chains.iter().all(|(_, c)| c.pass())
    }
}

pub fn default_params(name: &str) -> Result<ParamSet> {
    match name {
        "acc_lk" => Ok(acc::defaults()),
        "stones" => Ok(stones::defaults()),
        "segway_lite" => Ok(segway::lite_defaults()),
        "segway_backup" => Ok(segway::backup_defaults()),
        "braking" => Ok(braking::defaults()),
        other => Err(unknown(other)),
    }
}

pub fn build(name: &str, params: &ParamSet) -> Result<Scenario> {
    match name {
        "acc_lk" => acc::build(params),
        "stones" => stones::build(params),
        "segway_lite" => segway::build_lite(params),
        "segway_backup" => segway::build_backup(params),
        "braking" => braking::build(params),
        other => Err(unknown(other)),
    }
}

/// Build with defaults and the given overrides.
pub fn build_with(name: &str, overrides: &[(&str, f64)]) -> Result<Scenario> {
    let mut p = default_params(name)?;
    for (k, v) in overrides {
        p.set(k, *v)?;
    }
    build(name, &p)
}

fn unknown(name: &str) -> Error {
    Error::InvalidArgument(format!("unknown scenario {name}; registered: {}", SCENARIOS.join(", ")))
}

pub(crate) fn vecf(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

pub(crate) fn positive(p: &ParamSet, names: &[&str]) -> Result<()> {
    for n in names {
        let v = p.get(n);
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!("parameter {n} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Symmetric `P` with `A' P + P A = -I` for `A = [[0, 1], [-kp, -kd]]`.
pub(crate) fn pd_lyapunov(kp: f64, kd: f64) -> (f64, f64, f64) {
    let b = 1.0 / (2.0 * kp);
    let c = (2.0 * b + 1.0) / (2.0 * kd);
    let a = kd * b + kp * c;
    (a, b, c)
}

/// Largest eigenvalue of `[[a, b], [b, c]]`.
pub(crate) fn sym2_max_eig(a: f64, b: f64, c: f64) -> f64 {
    0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_set_rejects_unknown_with_suggestion() {
        let mut p = acc::defaults();
        p.set("tau_headway", 2.0).unwrap();
        assert_eq!(p.get("tau_headway"), 2.0);
        let err = p.set("tau_hedway", 1.0).unwrap_err().to_string();
        assert!(err.contains("tau_headway"), "{err}");
        assert!(p.set("tau_headway", f64::NAN).is_err());
    }

    #[test]
    fn registry_builds_every_scenario() {
        for name in SCENARIOS {
            let s = build(name, &default_params(name).unwrap()).unwrap();
            assert_eq!(s.name, *name);
            assert!(s.controller(s.filter_on).is_ok());
            assert!(s.controller(s.filter_off).is_ok());
            assert_eq!(s.x0.len(), s.plant.sys.n());
        }
        assert!(default_params("nope").is_err());
    }

    #[test]
    fn pd_lyapunov_solves_the_equation() {
        let (kp, kd) = (2.0, 3.0);
        let (a, b, c) = pd_lyapunov(kp, kd);
        let am = nalgebra::Matrix2::new(0.0, 1.0, -kp, -kd);
        let p = nalgebra::Matrix2::new(a, b, b, c);
        let r = am.transpose() * p + p * am + nalgebra::Matrix2::identity();
        assert!(r.norm() < 1e-12);
        let e = p.symmetric_eigenvalues();
        assert!((e.max() - sym2_max_eig(a, b, c)).abs() < 1e-12);
    }
}
