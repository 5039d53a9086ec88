//! End-to-end tests of the `cbfsim` binary and the config format.

use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;

use cbf_core::cli::{parse_config, CliConfig, CliError, SweepAxis};
use cbf_core::sim::TrajectoryLog;

fn cbfsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbfsim")).args(args).output().expect("spawn cbfsim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_stones_config_is_safe_and_writes_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write(
        dir.path(),
        "stones.toml",
        &format!(
            "[scenario]\nname = \"stones\"\n\n[run]\nout = {:?}\n",
            out.to_string_lossy()
        ),
    );
    let o = cbfsim(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("verdict SAFE"), "{text}");
    assert!(text.contains("exponential bound holds"), "{text}");

    let csv = out.join("stones_clf_ecbf_qp.csv");
    let log = TrajectoryLog::read_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(log.rows.len(), 12001);
    assert!(log.min_h(0) >= -1e-3 && log.min_h(1) >= -1e-3);
    // reload is bit-faithful: re-serialising gives identical bytes
    let mut again = Vec::new();
    log.write_csv(&mut again).unwrap();
    assert_eq!(again, std::fs::read(&csv).unwrap());
    assert!(out.join("stones_clf_ecbf_qp_summary.txt").exists());
}

#[test]
fn nominal_segway_reports_violation_time() {
    let o = cbfsim(&["run", "--scenario", "segway_lite", "--controller", "nominal"]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    assert!(text.contains("first violation t="), "{text}");
    assert!(text.contains("SAFETY VIOLATION"), "{text}");
}

#[test]
fn sweep_writes_four_logs_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_string_lossy().into_owned();
    let o = cbfsim(&["sweep", "--scenario", "stones", "--out", &d, "--duration", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for p in ["1", "10", "100", "1000"] {
        assert!(dir.path().join(format!("stones_clf_ecbf_qp_p_relax_{p}.csv")).exists());
    }
    let table = std::fs::read_to_string(dir.path().join("stones_clf_ecbf_qp_sweep_p_relax.txt")).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(table.contains("mean_delta"));
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "noisy.toml",
        "[scenario]\nname = \"braking\"\ncontroller = \"nominal\"\n\n[run]\nprocess_noise = 1e10\nduration = 1.0\n",
    );
    let o = cbfsim(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    assert!(stdout(&o).contains("NUMERICAL FAILURE"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cbfsim(&["run"]).status.code(), Some(1));
    assert_eq!(cbfsim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cbfsim(&["run", "--scenario", "nope"]).status.code(), Some(1));
    assert_eq!(cbfsim(&["run", "--scenario", "stones", "--controller", "nope"]).status.code(), Some(1));
    assert_eq!(cbfsim(&["run", "--scenario", "stones", "--duration", "abc"]).status.code(), Some(1));
    assert_eq!(cbfsim(&["run", "--config", "/nonexistent/cfg.toml"]).status.code(), Some(1));
    assert_eq!(cbfsim(&["run", "--scenario", "stones", "--seed", "9223372036854775808"]).status.code(), Some(1));
    assert_eq!(cbfsim(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[scenario]\nname = \"acc_lk\"\ntau_hedway = 1.8\n");
    let o = cbfsim(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tau_hedway") && err.contains("tau_headway"), "{err}");
}

#[test]
fn unwritable_output_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = cbfsim(&["run", "--scenario", "braking", "--duration", "0.5", "--out", &out.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn list_and_check_verbs() {
    let o = cbfsim(&["list-scenarios"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for name in cbf_core::scenarios::SCENARIOS {
        assert!(text.contains(name));
    }
    for name in ["acc_lk", "stones", "segway_lite"] {
        let o = cbfsim(&["check", "--scenario", name]);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
    }
}

#[test]
fn flags_override_config_and_seed_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = write(
        dir.path(),
        "acc.toml",
        "[scenario]\nname = \"acc_lk\"\ntau_headway = 2.0\n\n[run]\nduration = 20.0\nprocess_noise = 1e-4\n",
    );
    for out in [&a, &b] {
        let o = cbfsim(&["run", "--config", &cfg, "--duration", "2", "--seed", "5", "--out", &out.to_string_lossy()]);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    }
    let la = std::fs::read(a.join("acc_lk_clf_cbf_qp.csv")).unwrap();
    assert_eq!(la, std::fs::read(b.join("acc_lk_clf_cbf_qp.csv")).unwrap());
    let log = TrajectoryLog::read_csv(&la[..]).unwrap();
    assert_eq!(log.rows.len(), 201);
}

#[test]
fn config_maps_parameters_and_reports_errors() {
    let cfg = parse_config("[scenario]\nname = \"acc_lk\"\ncontroller = \"clf_cbf_qp\"\ntau_headway = 1.8\n").unwrap();
    assert_eq!(cfg.overrides.get("tau_headway"), Some(&1.8));
    let s = cfg.build().unwrap();
    assert_eq!(s.params.get("tau_headway"), 1.8);

    assert!(matches!(parse_config("[scenario]\nname = 3\n"), Err(CliError::Parse { line: 2, .. })));
    assert!(matches!(parse_config("[run]\nduration = 1.0\n"), Err(CliError::Parse { .. })));
    match parse_config("[scenario]\nname = \"stones\"\n\n[runn]\nseed = 1\n") {
        Err(CliError::UnknownKeys(k)) => {
            assert_eq!(k[0].key, "runn");
            assert_eq!(k[0].suggestion.as_deref(), Some("run"));
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_config("[scenario]\nname = \"stones\"\n[sweep]\nparam = \"p_relx\"\n").is_err());
    assert!(parse_config("[scenario]\nname = \"stones\"\n[run]\nctrl_dt = -1\n").is_err());
}

fn arb_config() -> impl Strategy<Value = CliConfig> {
    (
        prop::sample::select(cbf_core::scenarios::SCENARIOS.to_vec()),
        0.5..30.0f64,
        prop::sample::select(vec![1e-3, 2e-3, 5e-3, 1e-2]),
        1usize..5,
        0..=i64::MAX as u64,
        0.0..1e-2f64,
        prop::option::of(prop::collection::vec(-1e3..1e3f64, 1..5)),
        prop::option::of("[a-z]{1,8}"),
        any::<prop::sample::Index>(),
        1.0..1.5f64,
    )
        .prop_filter_map("override rejected", |(name, duration, ctrl_dt, sub, seed, noise, sweep, out, pick, factor)| {
            let mut c = CliConfig::for_scenario(name).unwrap();
            let params = c.build().unwrap().params;
            let names: Vec<&str> = params.names().collect();
            let param = names[pick.index(names.len())];
            c.overrides.insert(param.to_string(), params.get(param) * factor);
            c.build().ok()?;
            c.duration = duration.max(ctrl_dt);
            c.ctrl_dt = ctrl_dt;
            c.sim_substeps = sub;
            c.seed = seed;
            c.process_noise = noise;
            c.out = out.map(Into::into);
            c.sweep = sweep.map(|values| SweepAxis { param: param.to_string(), values });
            Some(c)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in arb_config()) {
        let text = cfg.to_toml();
        let back = parse_config(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(back, cfg);
    }
}
