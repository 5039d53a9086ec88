//! Command-line front end: config parsing, single runs, parameter sweeps,
//! consistency checks and scenario listing.
//!
//! Config files are TOML with three sections:
//!
//! ```toml
//! [scenario]
//! name = "acc_lk"
//! controller = "clf_cbf_qp"
//! tau_headway = 1.8        # any scenario parameter
//!
//! [run]
//! duration = 20.0
//! ctrl_dt = 0.01
//! sim_substeps = 1
//! seed = 0
//! process_noise = 0.0
//! tol = 1e-3
//! out = "out"
//!
//! [sweep]
//! param = "p_relax"
//! values = [1, 10, 100, 1000]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::ecbf::{eta_b, exponential_bound};
use crate::error::Error;
use crate::scenarios::{self, nearest, Scenario, SCENARIOS};
use crate::sim::{invariance_report, FailureKind, InvarianceReport, RunConfig, TrajectoryLog};

pub const EXIT_SAFE: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_SWEEP: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown keys: {}", .0.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("; "))]
    UnknownKeys(Vec<UnknownKey>),

    #[error("unknown scenario {name}; registered: {}", SCENARIOS.join(", "))]
    UnknownScenario { name: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] Error),
}

/// Unknown config key with its location and the closest valid key.
#[derive(Debug, Clone, PartialEq)]
pub struct UnknownKey {
    pub section: String,
    pub key: String,
    pub line: usize,
    pub suggestion: Option<String>,
}

impl std::fmt::Display for UnknownKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: [{}] {}", self.line, self.section, self.key)?;
        if let Some(s) = &self.suggestion {
            write!(f, " (did you mean {s}?)")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub param: String,
    pub values: Vec<f64>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub scenario: String,
    pub controller: String,
    /// Scenario parameter overrides, keyed by name.
    pub overrides: BTreeMap<String, f64>,
    pub duration: f64,
    pub ctrl_dt: f64,
    pub sim_substeps: usize,
    pub seed: u64,
    pub process_noise: f64,
    pub tol: f64,
    pub out: Option<PathBuf>,
    pub sweep: Option<SweepAxis>,
}

const SCENARIO_KEYS: &[&str] = &["name", "controller"];
const RUN_KEYS: &[&str] = &["duration", "ctrl_dt", "sim_substeps", "seed", "process_noise", "tol", "out"];
const SWEEP_KEYS: &[&str] = &["param", "values"];
const SECTIONS: &[&str] = &["scenario", "run", "sweep"];

impl CliConfig {
    /// Defaults for a scenario: its preferred controller and run settings.
    pub fn for_scenario(name: &str) -> Result<Self, CliError> {
        Self::resolve(name, None, BTreeMap::new(), RunOverrides::default(), None)
    }

    fn resolve(
        name: &str,
        controller: Option<String>,
        overrides: BTreeMap<String, f64>,
        run: RunOverrides,
        sweep: Option<SweepAxis>,
    ) -> Result<Self, CliError> {
        let s = build_scenario(name, &overrides)?;
        let controller = controller.unwrap_or_else(|| s.filter_on.to_string());
        check_controller(&s, &controller)?;
        if let Some(axis) = &sweep {
            if !s.params.contains(&axis.param) {
                return Err(CliError::Usage(unknown_param_message(&s, &axis.param)));
            }
            if axis.values.is_empty() || axis.values.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Usage("sweep values must be a nonempty list of finite numbers".into()));
            }
        }
        let cfg = Self {
            scenario: name.to_string(),
            controller,
            overrides,
            duration: run.duration.unwrap_or(s.duration),
            ctrl_dt: run.ctrl_dt.unwrap_or(s.ctrl_dt),
            sim_substeps: run.sim_substeps.unwrap_or(s.sim_substeps),
            seed: run.seed.unwrap_or(0),
            process_noise: run.process_noise.unwrap_or(0.0),
            tol: run.tol.unwrap_or(DEFAULT_TOL),
            out: run.out,
            sweep,
        };
        cfg.run_config(&s).validate()?;
        if !(cfg.tol >= 0.0) {
            return Err(CliError::Usage(format!("tol must be nonnegative, got {}", cfg.tol)));
        }
        Ok(cfg)
    }

    pub fn run_config(&self, s: &Scenario) -> RunConfig {
        RunConfig {
            ctrl_dt: self.ctrl_dt,
            sim_substeps: self.sim_substeps,
            duration: self.duration,
            x0: s.x0.clone(),
            seed: self.seed,
            process_noise: self.process_noise,
        }
    }

    pub fn build(&self) -> Result<Scenario, CliError> {
        build_scenario(&self.scenario, &self.overrides)
    }

    /// Serialize to the config format. Parsing the result yields `self`.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[scenario]");
        let _ = writeln!(s, "name = {}", quote(&self.scenario));
        let _ = writeln!(s, "controller = {}", quote(&self.controller));
        for (k, v) in &self.overrides {
            let _ = writeln!(s, "{k} = {}", float(*v));
        }
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "duration = {}", float(self.duration));
        let _ = writeln!(s, "ctrl_dt = {}", float(self.ctrl_dt));
        let _ = writeln!(s, "sim_substeps = {}", self.sim_substeps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "process_noise = {}", float(self.process_noise));
        let _ = writeln!(s, "tol = {}", float(self.tol));
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", quote(&out.to_string_lossy()));
        }
        if let Some(axis) = &self.sweep {
            let vals: Vec<String> = axis.values.iter().map(|v| float(*v)).collect();
            let _ = writeln!(s, "\n[sweep]");
            let _ = writeln!(s, "param = {}", quote(&axis.param));
            let _ = writeln!(s, "values = [{}]", vals.join(", "));
        }
        s
    }
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Shortest round-tripping decimal, always with a fractional part or
/// exponent so TOML reads it back as a float.
fn float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, Default)]
struct RunOverrides {
    duration: Option<f64>,
    ctrl_dt: Option<f64>,
    sim_substeps: Option<usize>,
    seed: Option<u64>,
    process_noise: Option<f64>,
    tol: Option<f64>,
    out: Option<PathBuf>,
}

fn build_scenario(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Scenario, CliError> {
    if !SCENARIOS.contains(&name) {
        return Err(CliError::UnknownScenario { name: name.to_string() });
    }
    let mut p = scenarios::default_params(name)?;
    for (k, v) in overrides {
        p.set(k, *v)?;
    }
    Ok(scenarios::build(name, &p)?)
}

fn check_controller(s: &Scenario, controller: &str) -> Result<(), CliError> {
    if s.controller_names().contains(&controller) {
        return Ok(());
    }
    let hint = nearest(controller, s.controller_names())
        .map(|c| format!(" (did you mean {c}?)"))
        .unwrap_or_default();
    Err(CliError::Usage(format!(
        "scenario {} has no controller {controller}{hint}; available: {}",
        s.name,
        s.controller_names().join(", ")
    )))
}

fn unknown_param_message(s: &Scenario, name: &str) -> String {
    let hint = nearest(name, s.params.names()).map(|c| format!(" (did you mean {c}?)")).unwrap_or_default();
    format!("scenario {} has no parameter {name}{hint}", s.name)
}

/// 1-based line of a byte offset.
fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line where `key` is assigned inside `[section]`, or 0.
fn line_of_key(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return i + 1;
                }
            }
        } else if section.is_empty() && line.starts_with(&format!("[{key}]")) {
            return i + 1;
        }
    }
    0
}

fn number(text: &str, section: &str, key: &str, v: &toml::Value) -> Result<f64, CliError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        other => Err(CliError::Parse {
            line: line_of_key(text, section, key),
            message: format!("[{section}] {key} must be a number, got {}", other.type_str()),
        }),
    }
}

fn nonneg_int(text: &str, section: &str, key: &str, v: &toml::Value) -> Result<u64, CliError> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(CliError::Parse {
            line: line_of_key(text, section, key),
            message: format!("[{section}] {key} must be a nonnegative integer"),
        }),
    }
}

fn string(text: &str, section: &str, key: &str, v: &toml::Value) -> Result<String, CliError> {
    v.as_str().map(str::to_string).ok_or_else(|| CliError::Parse {
        line: line_of_key(text, section, key),
        message: format!("[{section}] {key} must be a string"),
    })
}

/// Parse and validate a config, filling defaults from the scenario.
pub fn parse_config(text: &str) -> Result<CliConfig, CliError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Parse {
        line: e.span().map_or(0, |s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })?;

    let mut unknown = Vec::new();
    for (k, v) in &table {
        if !SECTIONS.contains(&k.as_str()) || !v.is_table() {
            unknown.push(UnknownKey {
                section: String::new(),
                key: k.clone(),
                line: line_of_key(text, "", k),
                suggestion: nearest(k, SECTIONS.iter().copied()).map(str::to_string),
            });
        }
    }
    let section = |name: &str| table.get(name).and_then(|v| v.as_table());

    let sc = section("scenario").ok_or_else(|| CliError::Parse {
        line: 0,
        message: "missing [scenario] section".into(),
    })?;
    let name = match sc.get("name") {
        Some(v) => string(text, "scenario", "name", v)?,
        None => {
            return Err(CliError::Parse {
                line: line_of_key(text, "", "scenario"),
                message: "[scenario] needs a name".into(),
            })
        }
    };
    let defaults = match scenarios::default_params(&name) {
        Ok(p) => p,
        Err(_) => return Err(CliError::UnknownScenario { name }),
    };
    let controller = sc.get("controller").map(|v| string(text, "scenario", "controller", v)).transpose()?;

    let mut overrides = BTreeMap::new();
    for (k, v) in sc {
        if SCENARIO_KEYS.contains(&k.as_str()) {
            continue;
        }
        if defaults.contains(k) {
            overrides.insert(k.clone(), number(text, "scenario", k, v)?);
        } else {
            unknown.push(UnknownKey {
                section: "scenario".into(),
                key: k.clone(),
                line: line_of_key(text, "scenario", k),
                suggestion: nearest(k, defaults.names().chain(SCENARIO_KEYS.iter().copied())).map(str::to_string),
            });
        }
    }

    let mut run = RunOverrides::default();
    if let Some(rt) = section("run") {
        for (k, v) in rt {
            match k.as_str() {
                "duration" => run.duration = Some(number(text, "run", k, v)?),
                "ctrl_dt" => run.ctrl_dt = Some(number(text, "run", k, v)?),
                "sim_substeps" => run.sim_substeps = Some(nonneg_int(text, "run", k, v)? as usize),
                "seed" => run.seed = Some(nonneg_int(text, "run", k, v)?),
                "process_noise" => run.process_noise = Some(number(text, "run", k, v)?),
                "tol" => run.tol = Some(number(text, "run", k, v)?),
                "out" => run.out = Some(PathBuf::from(string(text, "run", k, v)?)),
                _ => unknown.push(UnknownKey {
                    section: "run".into(),
                    key: k.clone(),
                    line: line_of_key(text, "run", k),
                    suggestion: nearest(k, RUN_KEYS.iter().copied()).map(str::to_string),
                }),
            }
        }
    }

    let mut sweep = None;
    if let Some(st) = section("sweep") {
        let mut param = None;
        let mut values = None;
        for (k, v) in st {
            match k.as_str() {
                "param" => param = Some(string(text, "sweep", k, v)?),
                "values" => {
                    let arr = v.as_array().ok_or_else(|| CliError::Parse {
                        line: line_of_key(text, "sweep", k),
                        message: "[sweep] values must be an array of numbers".into(),
                    })?;
                    values = Some(arr.iter().map(|x| number(text, "sweep", k, x)).collect::<Result<Vec<_>, _>>()?);
                }
                _ => unknown.push(UnknownKey {
                    section: "sweep".into(),
                    key: k.clone(),
                    line: line_of_key(text, "sweep", k),
                    suggestion: nearest(k, SWEEP_KEYS.iter().copied()).map(str::to_string),
                }),
            }
        }
        sweep = Some(SweepAxis {
            param: param.unwrap_or_else(|| "p_relax".into()),
            values: values.unwrap_or_else(|| DEFAULT_SWEEP.to_vec()),
        });
    }

    if !unknown.is_empty() {
        unknown.sort_by_key(|u| u.line);
        return Err(CliError::UnknownKeys(unknown));
    }
    CliConfig::resolve(&name, controller, overrides, run, sweep)
}

pub fn load_config(path: &Path) -> Result<CliConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// ECBF guarantee along a log: each enforced `h_i` stays above the pole-placed
/// exponential bound from the initial state, up to the first kick.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub worst_margin: f64,
    pub pass: bool,
}

pub fn exponential_bound_check(s: &Scenario, log: &TrajectoryLog, tol: f64) -> Option<BoundCheck> {
    if s.designs.is_empty() || log.rows.is_empty() {
        return None;
    }
    let x0 = &log.rows[0].x;
    let t0 = log.rows[0].t;
    let horizon = s.plant.kicks.iter().map(|k| k.t).fold(f64::INFINITY, f64::min);
    let mut worst = f64::INFINITY;
    for d in &s.designs {
        let eta0 = eta_b(&d.chain, x0);
        for r in log.rows.iter().take_while(|r| r.t < horizon) {
            let margin = d.chain.h(&r.x) - exponential_bound(d, &eta0, r.t - t0);
            worst = worst.min(margin);
        }
    }
    Some(BoundCheck {
        worst_margin: worst,
        pass: worst >= -tol,
    })
}

/// Everything reported about one run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub scenario: String,
    pub controller: String,
    pub report: InvarianceReport,
    pub delta_mean: Option<f64>,
    pub delta_max: Option<f64>,
    pub bound: Option<BoundCheck>,
    pub runtime_s: f64,
    pub csv: Option<PathBuf>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        match &self.report.failure {
            Some(f) if f.kind == FailureKind::Numerical => EXIT_NUMERICAL,
            _ if !self.report.safe => EXIT_VIOLATION,
            _ => EXIT_SAFE,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} controller {}", self.scenario, self.controller);
        for b in &self.report.barriers {
            let _ = write!(s, "  {:10} min {:+.6e} initial {:+.6e}", b.name, b.min_h, b.initial_h);
            if let Some(t) = b.first_violation {
                let _ = write!(s, " first violation t={t:.4}");
            }
            if let Some(t) = b.recovery_time {
                let _ = write!(s, " recovered t={t:.4}");
            }
            let _ = writeln!(s, " {}", if b.safe { "safe" } else { "UNSAFE" });
        }
        if let (Some(mean), Some(max)) = (self.delta_mean, self.delta_max) {
            let _ = writeln!(s, "  delta mean {mean:.6e} max {max:.6e}");
        }
        if let Some(b) = &self.bound {
            let verdict = if b.pass { "holds" } else { "VIOLATED" };
            let _ = writeln!(s, "  exponential bound {verdict} (worst margin {:+.3e})", b.worst_margin);
        }
        let _ = writeln!(
            s,
            "  max perturbation {:.6e} mean active set {:.3}",
            self.report.max_perturbation, self.report.mean_active_set
        );
        if let Some(f) = &self.report.failure {
            let _ = writeln!(s, "  failure ({:?}) at t={:.4}: {}", f.kind, f.t, f.message);
        }
        let _ = writeln!(s, "  tolerance {:e}, runtime {:.3} s", self.report.tol, self.runtime_s);
        let verdict = match self.exit_code() {
            EXIT_SAFE => "SAFE",
            EXIT_VIOLATION => "SAFETY VIOLATION",
            _ => "NUMERICAL FAILURE",
        };
        let _ = writeln!(s, "  verdict {verdict}");
        s
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn fmt_value(v: f64) -> String {
    format!("{v}").replace('-', "m")
}

/// Execute one run, writing `<scenario>_<controller><suffix>.csv` and a
/// matching `_summary.txt` under `out` when set.
pub fn execute(cfg: &CliConfig, suffix: &str) -> Result<RunSummary, CliError> {
    let s = cfg.build()?;
    let ctrl = s.controller(&cfg.controller)?;
    let start = Instant::now();
    let log = crate::sim::run_closed_loop(&s.plant, ctrl.as_ref(), &cfg.run_config(&s))?;
    let runtime_s = start.elapsed().as_secs_f64();
    let report = invariance_report(&log, cfg.tol);
    let deltas: Vec<f64> = log.deltas().collect();
    let (delta_mean, delta_max) = if deltas.is_empty() {
        (None, None)
    } else {
        (
            Some(deltas.iter().sum::<f64>() / deltas.len() as f64),
            Some(deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        )
    };
    let bound = if cfg.controller == s.filter_on {
        exponential_bound_check(&s, &log, cfg.tol)
    } else {
        None
    };
    let mut summary = RunSummary {
        scenario: cfg.scenario.clone(),
        controller: cfg.controller.clone(),
        report,
        delta_mean,
        delta_max,
        bound,
        runtime_s,
        csv: None,
    };
    if let Some(dir) = &cfg.out {
        prepare_out(dir)?;
        let stem = format!("{}_{}{suffix}", cfg.scenario, cfg.controller);
        let csv = dir.join(format!("{stem}.csv"));
        log.save(&csv).map_err(io_err(&csv))?;
        let txt = dir.join(format!("{stem}_summary.txt"));
        summary.csv = Some(csv);
        std::fs::write(&txt, summary.render()).map_err(io_err(&txt))?;
    }
    Ok(summary)
}

/// One sweep point.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub summary: Result<RunSummary, String>,
}

/// Run the sweep axis in parallel, one thread per value.
pub fn execute_sweep(cfg: &CliConfig) -> Result<Vec<SweepRow>, CliError> {
    let axis = cfg
        .sweep
        .clone()
        .unwrap_or_else(|| SweepAxis {
            param: "p_relax".into(),
            values: DEFAULT_SWEEP.to_vec(),
        });
    // validate every point before spawning anything
    let points: Vec<(f64, CliConfig)> = axis
        .values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.overrides.insert(axis.param.clone(), v);
            c.sweep = None;
            c.build().map(|_| (v, c))
        })
        .collect::<Result<_, _>>()?;
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .iter()
            .map(|(v, c)| {
                let suffix = format!("_{}_{}", axis.param, fmt_value(*v));
                (*v, scope.spawn(move || execute(c, &suffix)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(value, h)| SweepRow {
                value,
                summary: h.join().map_err(|_| "run panicked".to_string()).and_then(|r| r.map_err(|e| e.to_string())),
            })
            .collect::<Vec<_>>()
    });
    if let Some(dir) = &cfg.out {
        let path = dir.join(format!("{}_{}_sweep_{}.txt", cfg.scenario, cfg.controller, axis.param));
        std::fs::write(&path, sweep_table(&axis.param, &rows)).map_err(io_err(&path))?;
    }
    Ok(rows)
}

pub fn sweep_table(param: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{param:>12} {:>14} {:>14} {:>14} verdict\n", "mean_delta", "max_delta", "min_h");
    for r in rows {
        match &r.summary {
            Ok(sm) => {
                let min_h = sm.report.barriers.iter().map(|b| b.min_h).fold(f64::INFINITY, f64::min);
                let _ = writeln!(
                    s,
                    "{:>12} {:>14.6e} {:>14.6e} {:>14.6e} {}",
                    r.value,
                    sm.delta_mean.unwrap_or(f64::NAN),
                    sm.delta_max.unwrap_or(f64::NAN),
                    min_h,
                    match sm.exit_code() {
                        EXIT_SAFE => "safe",
                        EXIT_VIOLATION => "violation",
                        _ => "numerical",
                    }
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{:>12} error: {e}", r.value);
            }
        }
    }
    s
}

pub fn sweep_exit_code(rows: &[SweepRow]) -> i32 {
    rows.iter()
        .map(|r| match &r.summary {
            Ok(s) => s.exit_code(),
            Err(_) => EXIT_NUMERICAL,
        })
        .max()
        .unwrap_or(EXIT_SAFE)
}

pub fn list_scenarios() -> String {
    let mut s = String::new();
    for name in SCENARIOS {
        let sc = scenarios::build(name, &scenarios::default_params(name).expect("registered")).expect("defaults build");
        let _ = writeln!(s, "{name}");
        let _ = writeln!(s, "  controllers: {} (default {})", sc.controller_names().join(", "), sc.filter_on);
        let _ = writeln!(s, "  barriers: {}", sc.plant.barrier_names.join(", "));
        let params: Vec<String> = sc.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "  parameters: {}", params.join(" "));
    }
    s
}

/// Gradient and Lie-chain consistency report, and whether everything passed.
pub fn check_scenario(cfg: &CliConfig) -> Result<(String, bool), CliError> {
    let s = cfg.build()?;
    let report = s.check()?;
    let mut out = format!("scenario {}\n", s.name);
    for (name, g) in &report.gradients {
        let worst = g.failures().count();
        let _ = writeln!(out, "  gradient {name:8} {} ({worst} failing samples)", if g.pass { "pass" } else { "FAIL" });
    }
    for (name, c) in &report.chains {
        let _ = writeln!(
            out,
            "  {name:17} {} ({} failing of {} samples)",
            if c.pass() { "pass" } else { "FAIL" },
            c.failures.len(),
            c.samples
        );
    }
    if report.gradients.is_empty() && report.chains.is_empty() {
        let _ = writeln!(out, "  no analytic gradients to check");
    }
    Ok((out, report.pass()))
}

#[derive(Debug, Parser)]
#[command(name = "cbfsim", version, about = "Simulate barrier-function safety controllers on shipped scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop simulation.
    Run(CommonArgs),
    /// Run a parameter sweep (default: p_relax over 1, 10, 100, 1000).
    Sweep(CommonArgs),
    /// List registered scenarios, controllers and parameters.
    ListScenarios,
    /// Check analytic gradients and Lie chains against finite differences.
    Check(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    pub scenario: Option<String>,
    #[arg(long, value_name = "NAME")]
    pub controller: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "S")]
    pub duration: Option<f64>,
    /// Seeds are limited to what a config file can store.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
}

/// Merge flags over an optional config file. Flags win.
pub fn resolve_args(args: &CommonArgs) -> Result<CliConfig, CliError> {
    let base = match &args.config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let name = match (&args.scenario, &base) {
        (Some(n), _) => n.clone(),
        (None, Some(b)) => b.scenario.clone(),
        (None, None) => return Err(CliError::Usage("either --config or --scenario is required".into())),
    };
    let mut run = RunOverrides::default();
    let (mut overrides, mut controller, mut sweep) = (BTreeMap::new(), None, None);
    if let Some(b) = base.filter(|b| b.scenario == name) {
        overrides = b.overrides;
        controller = Some(b.controller);
        sweep = b.sweep;
        run = RunOverrides {
            duration: Some(b.duration),
            ctrl_dt: Some(b.ctrl_dt),
            sim_substeps: Some(b.sim_substeps),
            seed: Some(b.seed),
            process_noise: Some(b.process_noise),
            tol: Some(b.tol),
            out: b.out,
        };
    }
    if let Some(c) = &args.controller {
        controller = Some(c.clone());
    }
    if let Some(d) = args.duration {
        run.duration = Some(d);
    }
    if let Some(s) = args.seed {
        run.seed = Some(s);
    }
    if let Some(o) = &args.out {
        run.out = Some(o.clone());
    }
    CliConfig::resolve(&name, controller, overrides, run, sweep)
}

/// Run the command line and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_SAFE };
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Core(Error::DivergedState { .. } | Error::DivergedFlow { .. } | Error::NumericalFailure { .. }) => {
                    EXIT_NUMERICAL
                }
                _ => EXIT_USAGE,
            }
        }
    }
}

fn dispatch(cmd: &Command) -> Result<i32, CliError> {
    match cmd {
        Command::ListScenarios => {
            print!("{}", list_scenarios());
            Ok(EXIT_SAFE)
        }
        Command::Run(a) => {
            let cfg = resolve_args(a)?;
            let summary = execute(&cfg, "")?;
            print!("{}", summary.render());
            if let Some(p) = &summary.csv {
                println!("  log {}", p.display());
            }
            Ok(summary.exit_code())
        }
        Command::Sweep(a) => {
            let cfg = resolve_args(a)?;
            let rows = execute_sweep(&cfg)?;
            let param = cfg.sweep.as_ref().map_or("p_relax", |s| s.param.as_str());
            println!("scenario {} controller {}", cfg.scenario, cfg.controller);
            print!("{}", sweep_table(param, &rows));
            Ok(sweep_exit_code(&rows))
        }
        Command::Check(a) => {
            let cfg = resolve_args(a)?;
            let (text, pass) = check_scenario(&cfg)?;
            print!("{text}");
            Ok(if pass { EXIT_SAFE } else { EXIT_NUMERICAL })
        }
    }
}

/// Initial-state vector of a scenario after overrides, for tooling.
pub fn initial_state(cfg: &CliConfig) -> Result<DVector<f64>, CliError> {
    Ok(cfg.build()?.x0)
}
