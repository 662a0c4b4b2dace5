//! Command dispatch, result rendering and atomic output.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use coopdyn_core::dynamics::{fmt_f64, integrate_with, IntegrationOptions};
use coopdyn_core::linalg::SimplexPoint;
use coopdyn_core::lyapunov::{
    contraction_diagnostics, corollary_bounds, estimate_lambda, lambda_floquet, lambda_periodic_exact,
    ContractionDiagnostics,
};
use coopdyn_core::regimes::{occupation_concentration, sweep_lambda, ConcentrationMode};
use coopdyn_core::CoreError;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::config::{Command, ConfigError, ExperimentConfig, Format};

pub const TOOL: &str = "coopdyn";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CONFIG_BEGIN: &str = "# config begin";
pub const CONFIG_END: &str = "# config end";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

impl RunError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core(e) if e.is_assumption_violation() => 3,
            RunError::Core(e) if e.is_numerical() => 4,
            RunError::Core(_) => 2,
            RunError::Io { .. } => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "assumption_violation",
            4 => "numerical",
            _ => "io",
        }
    }

    /// One-line JSON record for standard error.
    pub fn record(&self) -> String {
        let mut rec = Map::new();
        rec.insert("error".into(), json!(self.kind()));
        rec.insert("exit_code".into(), json!(self.exit_code()));
        if let RunError::Config(c) = self {
            rec.insert("key".into(), json!(c.key));
        }
        rec.insert("message".into(), json!(self.to_string()));
        Value::Object(rec).to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Missing,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) => fmt_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) => json!(v),
            Cell::Int(v) => json!(v),
            Cell::Text(s) => json!(s),
            Cell::Missing => Value::Null,
        }
    }
}

/// Tabular result of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Payload {
    fn single(fields: Vec<(String, Cell)>) -> Self {
        let (columns, row) = fields.into_iter().unzip();
        Self {
            columns,
            rows: vec![row],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    Value::Object(
                        self.columns
                            .iter()
                            .zip(row)
                            .map(|(c, v)| (c.clone(), v.json()))
                            .collect(),
                    )
                })
                .collect(),
        )
    }
}

fn field(name: &str, cell: Cell) -> (String, Cell) {
    (name.to_string(), cell)
}

fn num(name: &str, v: f64) -> (String, Cell) {
    field(name, Cell::Num(v))
}

fn vector<'a>(prefix: &str, v: &'a SimplexPoint) -> impl Iterator<Item = (String, Cell)> + 'a {
    let prefix = prefix.to_string();
    v.coords()
        .iter()
        .enumerate()
        .map(move |(i, x)| (format!("{prefix}_{}", i + 1), Cell::Num(*x)))
}

fn horizon(cfg: &ExperimentConfig) -> f64 {
    cfg.numerics.horizon.expect("validated for this command")
}

/// Runs the library operation for `cfg.command`. Writes the trajectory dump
/// if one was requested.
pub fn compute(cfg: &ExperimentConfig) -> Result<Payload, RunError> {
    let spec = &cfg.environment.spec;
    let n = &cfg.numerics;
    let payload = match cfg.command {
        Command::Estimate => {
            let est = estimate_lambda(spec, cfg.seed, n.method, horizon(cfg), n.step, n.burn_in)?;
            if let Some(path) = &cfg.output.trajectory {
                let opts = IntegrationOptions::new(horizon(cfg), n.step).with_thin(n.thin);
                let rec = integrate_with(spec, cfg.seed, &SimplexPoint::barycenter(spec.dim()), &opts)?;
                let mut buf = Vec::new();
                rec.write_csv(&mut buf).map_err(|e| RunError::io(path, e))?;
                write_atomic(path, &buf)?;
            }
            Payload::single(vec![
                field("method", Cell::Text(est.method.name().into())),
                num("lambda_hat", est.value),
                num("half_split_gap", est.half_split_gap),
                num("horizon", est.horizon),
                num("step", est.step),
                num("burn_in", est.burn_in),
                field("seed", Cell::Int(cfg.seed)),
                num("simplex_defect", est.simplex_defect),
            ])
        }
        Command::PeriodicExact => {
            let sol = lambda_periodic_exact(spec, n.step)?;
            let mut fields = vec![
                field("method", Cell::Text(sol.estimate.method.name().into())),
                num("lambda_hat", sol.estimate.value),
                num("period", sol.estimate.horizon),
                num("step", sol.estimate.step),
                field("iterations", Cell::Int(sol.iterations as u64)),
            ];
            fields.extend(vector("theta_star", &sol.theta_star));
            Payload::single(fields)
        }
        Command::Floquet => {
            let sol = lambda_floquet(spec, n.step)?;
            let mut fields = vec![
                field("method", Cell::Text(sol.estimate.method.name().into())),
                num("lambda_hat", sol.estimate.value),
                num("period", sol.estimate.horizon),
                num("step", sol.estimate.step),
            ];
            fields.extend(vector("direction", &sol.direction));
            Payload::single(fields)
        }
        Command::Bounds => {
            let b = corollary_bounds(spec)?;
            Payload::single(vec![
                num("colsum_lower", b.column_sum.0),
                num("colsum_upper", b.column_sum.1),
                num("sym_lower", b.symmetric.0),
                num("sym_upper", b.symmetric.1),
                num("refinement_gap", b.refinement_gap),
            ])
        }
        Command::Sweep => {
            let sweep = cfg.sweep.as_ref().expect("validated for this command");
            let res = sweep_lambda(spec, &sweep.t_values, cfg.seed, horizon(cfg), n.step)?;
            let columns = coopdyn_core::regimes::RegimeSweepResult::CSV_HEADER
                .split(',')
                .map(String::from)
                .collect();
            let rows = res
                .t_values
                .iter()
                .zip(&res.lambda_hats)
                .zip(&res.concentration)
                .map(|((t, est), c)| {
                    vec![
                        Cell::Num(*t),
                        Cell::Num(est.value),
                        Cell::Num(est.half_split_gap),
                        Cell::Num(res.fast_limit),
                        Cell::Num(res.slow_limit),
                        Cell::Num(*c),
                        Cell::Int(est.seed.unwrap_or_default()),
                        Cell::Num(est.horizon),
                        Cell::Num(est.step),
                    ]
                })
                .collect();
            Payload { columns, rows }
        }
        Command::Contraction => {
            let diag = contraction_diagnostics(spec, cfg.seed, horizon(cfg), n.step)?;
            let (positive, first, rate) = match diag {
                ContractionDiagnostics::Positive {
                    first_positive_time,
                    empirical_rate,
                } => (true, Cell::Num(first_positive_time), empirical_rate.map_or(Cell::Missing, Cell::Num)),
                ContractionDiagnostics::NoPositivity { .. } => (false, Cell::Missing, Cell::Missing),
            };
            Payload::single(vec![
                field("positive", Cell::Text(positive.to_string())),
                field("first_positive_time", first),
                field("empirical_rate", rate),
                num("horizon", horizon(cfg)),
                num("step", n.step),
                field("seed", Cell::Int(cfg.seed)),
            ])
        }
        Command::Concentration => {
            let t = spec.timescale();
            let c = occupation_concentration(spec, t, cfg.seed, horizon(cfg), n.step, n.burn_in, n.mode)?;
            let mode = match c.mode {
                ConcentrationMode::Fast => "fast",
                ConcentrationMode::Slow => "slow",
            };
            Payload::single(vec![
                num("T", t),
                num("distance", c.distance),
                num("half_split_gap", c.half_split_gap),
                field("mode", Cell::Text(mode.into())),
                field("seed", Cell::Int(cfg.seed)),
                num("horizon", horizon(cfg)),
                num("step", n.step),
            ])
        }
    };
    Ok(payload)
}

/// Run metadata; only `wall_clock` and `elapsed` vary between reruns.
#[derive(Debug, Clone)]
pub struct Metadata {
    pub wall_clock_unix_s: f64,
    pub elapsed_s: f64,
}

pub fn render(cfg: &ExperimentConfig, meta: &Metadata, payload: &Payload) -> String {
    let echo = cfg.to_toml();
    match cfg.output.format {
        Format::Csv => {
            let mut out = String::new();
            out.push_str(&format!("# {TOOL} {VERSION}\n"));
            out.push_str(&format!("# command: {}\n", cfg.command));
            out.push_str(&format!("# seed: {}\n", cfg.seed));
            out.push_str(&format!("# wall_clock_unix_s: {:.3}\n", meta.wall_clock_unix_s));
            out.push_str(&format!("# elapsed_s: {:.3}\n", meta.elapsed_s));
            out.push_str(CONFIG_BEGIN);
            out.push('\n');
            for line in echo.lines() {
                out.push_str("# ");
                out.push_str(line);
                out.push('\n');
            }
            out.push_str(CONFIG_END);
            out.push('\n');
            out.push_str(&payload.to_csv());
            out
        }
        Format::Json => {
            let doc = json!({
                "metadata": {
                    "tool": TOOL,
                    "version": VERSION,
                    "command": cfg.command.name(),
                    "seed": cfg.seed,
                    "wall_clock_unix_s": meta.wall_clock_unix_s,
                    "elapsed_s": meta.elapsed_s,
                    "config": echo,
                },
                "payload": payload.to_json(),
            });
            let mut s = serde_json::to_string_pretty(&doc).expect("json values serialize");
            s.push('\n');
            s
        }
    }
}

/// Config echo embedded in a CSV result file.
pub fn extract_config_echo(csv: &str) -> Option<String> {
    let start = csv.find(CONFIG_BEGIN)? + CONFIG_BEGIN.len();
    let end = csv.find(CONFIG_END)?;
    let mut out = String::new();
    for line in csv[start..end].lines().filter(|l| !l.is_empty()) {
        out.push_str(line.strip_prefix("# ").or_else(|| line.strip_prefix('#'))?);
        out.push('\n');
    }
    Some(out)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| RunError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| RunError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| RunError::io(path, e))?;
    tmp.persist(path).map_err(|e| RunError::io(path, e.error))?;
    Ok(())
}

/// Computes, renders and writes the result of `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(), RunError> {
    let wall_clock_unix_s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let started = Instant::now();
    let payload = compute(cfg)?;
    let meta = Metadata {
        wall_clock_unix_s,
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    let doc = render(cfg, &meta, &payload);
    match &cfg.output.path {
        Some(path) => write_atomic(path, doc.as_bytes()),
        None => io::stdout()
            .write_all(doc.as_bytes())
            .map_err(|e| RunError::io(Path::new("<stdout>"), e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    const ESTIMATE: &str = r#"
command = "estimate"
seed = 7

[environment]
kind = "constant"
A0 = [[1, 2], [3, 0]]

[numerics]
horizon = 200
step = 1e-3
burn_in = 20
"#;

    fn meta() -> Metadata {
        Metadata {
            wall_clock_unix_s: 0.0,
            elapsed_s: 0.0,
        }
    }

    #[test]
    fn estimate_payload_recovers_perron_root() {
        let cfg = parse_config(ESTIMATE).unwrap();
        let p = compute(&cfg).unwrap();
        let i = p.columns.iter().position(|c| c == "lambda_hat").unwrap();
        let Cell::Num(v) = p.rows[0][i] else { panic!() };
        assert!((v - 3.0).abs() < 1e-3);
    }

    #[test]
    fn csv_echo_round_trips() {
        let cfg = parse_config(ESTIMATE).unwrap();
        let doc = render(&cfg, &meta(), &Payload::single(vec![num("x", 1.0)]));
        let echo = extract_config_echo(&doc).unwrap();
        assert_eq!(parse_config(&echo).unwrap(), cfg);
        assert!(doc.ends_with("x\n1.0000000000000000e0\n"));
    }

    #[test]
    fn json_document_layout() {
        let mut cfg = parse_config(ESTIMATE).unwrap();
        cfg.output.format = Format::Json;
        let doc = render(&cfg, &meta(), &Payload::single(vec![num("x", 1.5), field("y", Cell::Missing)]));
        let v: Value = serde_json::from_str(&doc).unwrap();
        assert_eq!(v["payload"][0]["x"], json!(1.5));
        assert_eq!(v["payload"][0]["y"], Value::Null);
        assert_eq!(v["metadata"]["seed"], json!(7));
        let echo = v["metadata"]["config"].as_str().unwrap();
        assert_eq!(parse_config(echo).unwrap().environment, cfg.environment);
    }

    #[test]
    fn exit_codes() {
        let cfg = RunError::Config(ConfigError::new("numerics.step", "bad"));
        assert_eq!(cfg.exit_code(), 2);
        assert!(cfg.record().contains("\"key\":\"numerics.step\""));
        assert_eq!(RunError::Core(CoreError::Reducible("x".into())).exit_code(), 3);
        assert_eq!(RunError::Core(CoreError::NumericalBlowup("x".into())).exit_code(), 4);
        assert_eq!(RunError::io(Path::new("x"), io::Error::other("x")).exit_code(), 5);
    }
}
