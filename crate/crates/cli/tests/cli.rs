use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Output};

use coopdyn_cli::config::Command;
use coopdyn_cli::parse_config;
use coopdyn_cli::run::extract_config_echo;
use serde_json::Value;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_coopdyn")
}

fn configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    files
}

fn run(args: &[&str]) -> Output {
    Process::new(bin()).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not a JSON record: {stderr}"))
}

const CONSTANT: &str = r#"
command = "estimate"
seed = 1

[environment]
kind = "constant"
A0 = [[1.0, 2.0], [3.0, 0.0]]

[numerics]
horizon = 20.0
step = 1e-2
"#;

#[test]
fn shipped_configs_parse_and_round_trip() {
    let files = configs();
    assert!(files.len() >= 7);
    let mut seen = Vec::new();
    for path in files {
        let cfg = parse_config(&fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg, "{}", path.display());
        seen.push(cfg.command);
    }
    for c in Command::ALL {
        assert!(seen.contains(&c), "no shipped config for {c}");
    }
}

#[test]
fn estimate_writes_csv_with_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", CONSTANT);
    let out_path = dir.path().join("out.csv");
    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--output", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("# coopdyn "));
    assert!(text.contains("# seed: 1\n"));
    let echo = extract_config_echo(&text).unwrap();
    let mut original = parse_config(CONSTANT).unwrap();
    original.output.path = Some(out_path.clone());
    assert_eq!(parse_config(&echo).unwrap(), original);

    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    let header: Vec<&str> = rows[0].split(',').collect();
    let values: Vec<&str> = rows[1].split(',').collect();
    let i = header.iter().position(|h| *h == "lambda_hat").unwrap();
    let lam: f64 = values[i].parse().unwrap();
    assert!((lam - 3.0).abs() < 1e-3);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", CONSTANT);
    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--seed", "77", "--format", "json"]);
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["metadata"]["seed"], 77);
    assert_eq!(doc["payload"][0]["seed"], 77);
    let lam = doc["payload"][0]["lambda_hat"].as_f64().unwrap();
    assert!((lam - 3.0).abs() < 1e-3);
}

#[test]
fn trajectory_dump_has_dynamics_schema() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("traj.csv");
    let text = format!("{CONSTANT}thin = 10\n\n[output]\ntrajectory = {:?}\n", traj.to_str().unwrap());
    let cfg = write(dir.path(), "c.toml", &text);
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = fs::read_to_string(traj).unwrap();
    let mut lines = dump.lines();
    assert_eq!(lines.next(), Some("time,theta_1,theta_2,log_rho,running_avg"));
    assert_eq!(lines.count(), 201);
}

#[test]
fn negative_step_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &CONSTANT.replace("step = 1e-2", "step = -1e-2"));
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["key"], "numerics.step");
    assert_eq!(rec["exit_code"], 2);
}

#[test]
fn negative_rate_names_the_entry() {
    let text = r#"
command = "bounds"
seed = 0
[environment]
kind = "markov_switch"
rates = [[0.0, -1.0], [1.0, 0.0]]
matrices = [[[-1.0]], [[1.0]]]
"#;
    let err = parse_config(text).unwrap_err();
    assert_eq!(err.key, "environment.rates[1][2]");
}

#[test]
fn metzler_violation_is_reported() {
    let text = CONSTANT.replace("[3.0, 0.0]", "[-3.0, 0.0]");
    let err = parse_config(&text).unwrap_err();
    assert_eq!(err.key, "environment.A0");
    assert!(err.message.contains("Metzler"), "{}", err.message);
}

#[test]
fn reducible_monodromy_is_an_assumption_violation() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
command = "floquet"
seed = 0
[environment]
kind = "constant"
A0 = [[-1.0, 0.0], [1.0, -2.0]]
[numerics]
step = 1e-2
"#;
    let cfg = write(dir.path(), "c.toml", text);
    let out = run(&["floquet", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"], "assumption_violation");
}

#[test]
fn unstable_step_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONSTANT
        .replace("[[1.0, 2.0], [3.0, 0.0]]", "[[-10000.0, 1.0], [1.0, 0.0]]")
        .replace("step = 1e-2", "step = 1.0");
    let cfg = write(dir.path(), "c.toml", &text);
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_record(&out)["error"], "numerical");
}

#[test]
fn io_failures_exit_with_five() {
    let out = run(&["estimate", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(5));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", CONSTANT);
    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--output", "/nonexistent/dir/out.csv"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn help_documents_every_key() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in [
        "command", "seed", "kind", "timescale", "A0", "phase", "frequencies", "phases", "sigma",
        "initial_point", "rates", "initial_state", "matrices", "horizon", "step", "burn_in", "thin",
        "method", "mode", "T_min", "T_max", "points_per_decade", "T_values", "path", "format",
        "trajectory",
    ] {
        assert!(text.contains(key), "--help does not mention {key}");
    }
}

#[test]
fn unknown_command_is_rejected() {
    let out = run(&["explode", "--config", "x.toml"]);
    assert_eq!(out.status.code(), Some(2));
}
