//! Drive runs from a TOML config the same way `cbfsim` does: parse,
//! execute with logs written to disk, and sweep one parameter.
//!
//! cargo run --release --example config_runs

use cbf_core::cli::{execute, execute_sweep, parse_config, sweep_table, SweepAxis};

const CONFIG: &str = r#"
[scenario]
name = "stones"
controller = "clf_ecbf_qp"
pole_1 = 3.0
pole_2 = 6.0

[run]
duration = 6.0
seed = 1
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("cbf_config_runs");
    let mut cfg = parse_config(CONFIG)?;
    cfg.out = Some(out.clone());
    println!("{}", cfg.to_toml());

    let summary = execute(&cfg, "")?;
    print!("{}", summary.render());
    println!("exit code {}", summary.exit_code());

    // typos are caught with a suggestion
    if let Err(e) = parse_config("[scenario]\nname = \"stones\"\npole1 = 3.0\n") {
        println!("rejected: {e}");
    }

    cfg.sweep = Some(SweepAxis {
        param: "p_relax".into(),
        values: vec![1.0, 10.0, 100.0],
    });
    let rows = execute_sweep(&cfg)?;
    print!("{}", sweep_table("p_relax", &rows));
    println!("logs in {}", out.display());
    Ok(())
}
