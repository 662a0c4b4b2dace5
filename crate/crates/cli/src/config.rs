//! Experiment configuration: parsing, validation and the TOML echo written
//! into every output file.

use std::fmt;
use std::path::PathBuf;

use coopdyn_core::environment::{EnvironmentKind, EnvironmentSpec, FourierMap, MatrixMap};
use coopdyn_core::linalg::{Matrix, MetzlerMatrix};
use coopdyn_core::lyapunov::Method;
use coopdyn_core::regimes::{log_spaced_grid, ConcentrationMode, DEFAULT_POINTS_PER_DECADE};
use thiserror::Error;
use toml::{Table, Value};

pub const DEFAULT_STEP: f64 = coopdyn_core::dynamics::DEFAULT_STEP;

/// A config problem tied to the key that caused it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Estimate,
    PeriodicExact,
    Floquet,
    Bounds,
    Sweep,
    Contraction,
    Concentration,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Estimate,
        Command::PeriodicExact,
        Command::Floquet,
        Command::Bounds,
        Command::Sweep,
        Command::Contraction,
        Command::Concentration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::PeriodicExact => "periodic-exact",
            Command::Floquet => "floquet",
            Command::Bounds => "bounds",
            Command::Sweep => "sweep",
            Command::Contraction => "contraction",
            Command::Concentration => "concentration",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Commands that integrate over `[0, horizon]`.
    fn needs_horizon(self) -> bool {
        !matches!(self, Command::PeriodicExact | Command::Floquet | Command::Bounds)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentConfig {
    /// Kind as written in the config; `constant` is kept for the echo.
    pub label: String,
    pub spec: EnvironmentSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Numerics {
    pub horizon: Option<f64>,
    pub step: f64,
    pub burn_in: Option<f64>,
    pub thin: usize,
    pub method: Method,
    pub mode: Option<ConcentrationMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepGrid {
    LogSpaced {
        t_min: f64,
        t_max: f64,
        points_per_decade: usize,
    },
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    pub t_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    /// `None` writes to standard output.
    pub path: Option<PathBuf>,
    pub format: Format,
    /// Optional trajectory dump for `estimate`.
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    pub environment: EnvironmentConfig,
    pub numerics: Numerics,
    pub sweep: Option<SweepConfig>,
    pub output: OutputConfig,
}

/// Overrides supplied on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, &Overrides::default())
}

pub fn parse_config_with(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::new("document", parse_message(text, &e)))?;
    check_keys(&root, "", &["command", "seed", "environment", "numerics", "sweep", "output"])?;

    let command = match overrides.command {
        Some(c) => c,
        None => {
            let name = req_str(&root, "", "command")?;
            Command::from_name(name).ok_or_else(|| {
                let names: Vec<_> = Command::ALL.iter().map(|c| c.name()).collect();
                ConfigError::new("command", format!("unknown command {name:?}; expected one of {}", names.join(", ")))
            })?
        }
    };
    let seed = match overrides.seed {
        Some(s) => s,
        None => parse_seed(root.get("seed"))?,
    };
    let environment = parse_environment(req_table(&root, "", "environment")?)?;
    let empty = Table::new();
    let numerics = parse_numerics(opt_table(&root, "", "numerics")?.unwrap_or(&empty), command)?;
    let sweep = match (command, opt_table(&root, "", "sweep")?) {
        (Command::Sweep, Some(t)) => Some(parse_sweep(t)?),
        (Command::Sweep, None) => {
            return Err(ConfigError::new("sweep", "the sweep command needs a [sweep] table"))
        }
        (_, Some(_)) => {
            return Err(ConfigError::new("sweep", "a [sweep] table is only allowed with the sweep command"))
        }
        (_, None) => None,
    };
    let mut output = parse_output(opt_table(&root, "", "output")?.unwrap_or(&empty))?;
    if let Some(p) = &overrides.output {
        output.path = Some(p.clone());
    }
    if let Some(f) = overrides.format {
        output.format = f;
    }
    Ok(ExperimentConfig {
        command,
        seed,
        environment,
        numerics,
        sweep,
        output,
    })
}

fn parse_message(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("parse error at line {line}: {msg}")
        }
        None => format!("parse error: {msg}"),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn check_keys(table: &Table, prefix: &str, allowed: &[&str]) -> Result<()> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(ConfigError::new(join(prefix, key), "unknown key"));
        }
    }
    Ok(())
}

fn req_table<'a>(t: &'a Table, prefix: &str, key: &str) -> Result<&'a Table> {
    opt_table(t, prefix, key)?.ok_or_else(|| ConfigError::new(join(prefix, key), "missing required table"))
}

fn opt_table<'a>(t: &'a Table, prefix: &str, key: &str) -> Result<Option<&'a Table>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Table(v)) => Ok(Some(v)),
        Some(_) => Err(ConfigError::new(join(prefix, key), "must be a table")),
    }
}

fn req_str<'a>(t: &'a Table, prefix: &str, key: &str) -> Result<&'a str> {
    opt_str(t, prefix, key)?.ok_or_else(|| ConfigError::new(join(prefix, key), "missing required key"))
}

fn opt_str<'a>(t: &'a Table, prefix: &str, key: &str) -> Result<Option<&'a str>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ConfigError::new(join(prefix, key), "must be a string")),
    }
}

fn as_f64(v: &Value, key: &str) -> Result<f64> {
    let x = match v {
        Value::Float(x) => *x,
        Value::Integer(i) => *i as f64,
        _ => return Err(ConfigError::new(key, "must be a number")),
    };
    if !x.is_finite() {
        return Err(ConfigError::new(key, "must be finite"));
    }
    Ok(x)
}

fn opt_f64(t: &Table, prefix: &str, key: &str) -> Result<Option<f64>> {
    t.get(key).map(|v| as_f64(v, &join(prefix, key))).transpose()
}

fn req_f64(t: &Table, prefix: &str, key: &str) -> Result<f64> {
    opt_f64(t, prefix, key)?.ok_or_else(|| ConfigError::new(join(prefix, key), "missing required key"))
}

fn opt_usize(t: &Table, prefix: &str, key: &str) -> Result<Option<usize>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
        Some(_) => Err(ConfigError::new(join(prefix, key), "must be a nonnegative integer")),
    }
}

fn f64_list(v: &Value, key: &str) -> Result<Vec<f64>> {
    let Value::Array(items) = v else {
        return Err(ConfigError::new(key, "must be an array of numbers"));
    };
    items
        .iter()
        .enumerate()
        .map(|(i, x)| as_f64(x, &format!("{key}[{}]", i + 1)))
        .collect()
}

fn matrix(v: &Value, key: &str) -> Result<Matrix> {
    let Value::Array(rows) = v else {
        return Err(ConfigError::new(key, "must be a matrix given as an array of rows"));
    };
    let rows = rows
        .iter()
        .enumerate()
        .map(|(i, r)| f64_list(r, &format!("{key}[{}]", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows).map_err(|e| ConfigError::new(key, e.to_string()))
}

fn metzler(v: &Value, key: &str) -> Result<MetzlerMatrix> {
    MetzlerMatrix::with_context(matrix(v, key)?, &format!(" of {key}"))
        .map_err(|e| ConfigError::new(key, e.to_string()))
}

fn parse_seed(v: Option<&Value>) -> Result<u64> {
    match v {
        None => Err(ConfigError::new("seed", "missing required key")),
        Some(Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
        Some(Value::String(s)) => s
            .parse()
            .map_err(|_| ConfigError::new("seed", "must be an unsigned 64-bit integer")),
        Some(_) => Err(ConfigError::new("seed", "must be an unsigned 64-bit integer")),
    }
}

const KINDS: [&str; 5] = ["constant", "periodic", "quasi_periodic", "markov_switch", "circle_diffusion"];

fn parse_environment(t: &Table) -> Result<EnvironmentConfig> {
    const P: &str = "environment";
    let label = req_str(t, P, "kind")?;
    let timescale = opt_f64(t, P, "timescale")?.unwrap_or(1.0);
    if timescale <= 0.0 {
        return Err(ConfigError::new("environment.timescale", "must be positive"));
    }
    let common = ["kind", "timescale"];
    let wrap = |e: coopdyn_core::CoreError| ConfigError::new(P, e.to_string());
    let spec = match label {
        "constant" => {
            check_fourier_keys(t, &[&common[..], &["A0"]].concat(), false, false)?;
            let a = metzler(req(t, "A0")?, "environment.A0")?;
            EnvironmentSpec::constant(a).with_timescale(timescale).map_err(wrap)?
        }
        "periodic" => {
            check_fourier_keys(t, &[&common[..], &["phase"]].concat(), true, false)?;
            let phase = opt_f64(t, P, "phase")?.unwrap_or(0.0);
            let kind = EnvironmentKind::Periodic { phase };
            EnvironmentSpec::new(kind, MatrixMap::Fourier(fourier(t, 1)?), timescale).map_err(wrap)?
        }
        "quasi_periodic" => {
            check_fourier_keys(t, &[&common[..], &["frequencies", "phases"]].concat(), true, true)?;
            let frequencies = f64_list(req(t, "frequencies")?, "environment.frequencies")?;
            if frequencies.is_empty() {
                return Err(ConfigError::new("environment.frequencies", "must not be empty"));
            }
            let phases = match t.get("phases") {
                Some(v) => f64_list(v, "environment.phases")?,
                None => vec![0.0; frequencies.len()],
            };
            if phases.len() != frequencies.len() {
                return Err(ConfigError::new(
                    "environment.phases",
                    format!("needs {} entries, one per frequency", frequencies.len()),
                ));
            }
            let map = fourier(t, frequencies.len())?;
            let kind = EnvironmentKind::QuasiPeriodic { frequencies, phases };
            EnvironmentSpec::new(kind, MatrixMap::Fourier(map), timescale).map_err(wrap)?
        }
        "circle_diffusion" => {
            check_fourier_keys(t, &[&common[..], &["sigma", "initial_point"]].concat(), true, false)?;
            let sigma = req_f64(t, P, "sigma")?;
            if sigma <= 0.0 {
                return Err(ConfigError::new("environment.sigma", "must be positive"));
            }
            let initial_point = opt_f64(t, P, "initial_point")?.unwrap_or(0.0);
            let kind = EnvironmentKind::CircleDiffusion { sigma, initial_point };
            EnvironmentSpec::new(kind, MatrixMap::Fourier(fourier(t, 1)?), timescale).map_err(wrap)?
        }
        "markov_switch" => {
            check_keys(t, P, &[&common[..], &["rates", "initial_state", "matrices"]].concat())?;
            let rates = matrix(req(t, "rates")?, "environment.rates")?;
            for i in 0..rates.dim() {
                for j in 0..rates.dim() {
                    if i != j && rates[(i, j)] < 0.0 {
                        return Err(ConfigError::new(
                            format!("environment.rates[{}][{}]", i + 1, j + 1),
                            format!("switching rate {} must be nonnegative", rates[(i, j)]),
                        ));
                    }
                }
            }
            let initial_state = opt_usize(t, P, "initial_state")?.unwrap_or(1);
            if initial_state == 0 || initial_state > rates.dim() {
                return Err(ConfigError::new(
                    "environment.initial_state",
                    format!("must lie in 1..={}", rates.dim()),
                ));
            }
            let Value::Array(list) = req(t, "matrices")? else {
                return Err(ConfigError::new("environment.matrices", "must be an array of matrices"));
            };
            let matrices = list
                .iter()
                .enumerate()
                .map(|(i, m)| metzler(m, &format!("environment.matrices[{}]", i + 1)))
                .collect::<Result<Vec<_>>>()?;
            let kind = EnvironmentKind::MarkovSwitch {
                rates,
                initial_state: initial_state - 1,
            };
            EnvironmentSpec::new(kind, MatrixMap::Table(matrices), timescale).map_err(wrap)?
        }
        other => {
            return Err(ConfigError::new(
                "environment.kind",
                format!("unknown kind {other:?}; expected one of {}", KINDS.join(", ")),
            ))
        }
    };
    Ok(EnvironmentConfig {
        label: label.to_string(),
        spec,
    })
}

fn req<'a>(t: &'a Table, key: &str) -> Result<&'a Value> {
    t.get(key)
        .ok_or_else(|| ConfigError::new(format!("environment.{key}"), "missing required key"))
}

/// Fourier coefficient key: `C3` → `(Cos, 3, None)`, `D2_1` → `(Sin, 2, Some(1))`.
fn coefficient_key(key: &str) -> Option<(bool, u32, Option<usize>)> {
    let cos = match key.chars().next()? {
        'C' => true,
        'D' => false,
        _ => return None,
    };
    let rest = &key[1..];
    let (order, axis) = match rest.split_once('_') {
        Some((o, a)) => (o, Some(a.parse().ok()?)),
        None => (rest, None),
    };
    if order.is_empty() || !order.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((cos, order.parse().ok()?, axis))
}

fn check_fourier_keys(t: &Table, allowed: &[&str], harmonics: bool, torus: bool) -> Result<()> {
    for key in t.keys() {
        if allowed.contains(&key.as_str()) || (harmonics && key == "A0") {
            continue;
        }
        let ok = harmonics
            && matches!(coefficient_key(key), Some((_, k, axis)) if k >= 1 && axis.is_some() == torus);
        if !ok {
            return Err(ConfigError::new(format!("environment.{key}"), "unknown key"));
        }
    }
    Ok(())
}

fn fourier(t: &Table, axes: usize) -> Result<FourierMap> {
    let base = matrix(req(t, "A0")?, "environment.A0")?;
    let mut coeffs: Vec<(usize, u32, Option<Matrix>, Option<Matrix>)> = Vec::new();
    for (key, v) in t {
        let Some((cos, order, axis)) = coefficient_key(key) else {
            continue;
        };
        let axis = axis.unwrap_or(1);
        let full = format!("environment.{key}");
        if axis == 0 || axis > axes {
            return Err(ConfigError::new(full, format!("axis must lie in 1..={axes}")));
        }
        let m = matrix(v, &full)?;
        let idx = match coeffs.iter().position(|c| c.0 == axis - 1 && c.1 == order) {
            Some(i) => i,
            None => {
                coeffs.push((axis - 1, order, None, None));
                coeffs.len() - 1
            }
        };
        if cos {
            coeffs[idx].2 = Some(m);
        } else {
            coeffs[idx].3 = Some(m);
        }
    }
    coeffs.sort_by_key(|c| (c.0, c.1));
    let mut map = FourierMap::constant(base);
    for (axis, order, c, s) in coeffs {
        map = map
            .with_harmonic(axis, order, c, s)
            .map_err(|e| ConfigError::new("environment", e.to_string()))?;
    }
    Ok(map)
}

fn parse_numerics(t: &Table, command: Command) -> Result<Numerics> {
    const P: &str = "numerics";
    check_keys(t, P, &["horizon", "step", "burn_in", "thin", "method", "mode"])?;
    let horizon = opt_f64(t, P, "horizon")?;
    let step = opt_f64(t, P, "step")?.unwrap_or(DEFAULT_STEP);
    if step <= 0.0 {
        return Err(ConfigError::new("numerics.step", format!("must be positive, got {step}")));
    }
    if command.needs_horizon() {
        let h = horizon
            .ok_or_else(|| ConfigError::new("numerics.horizon", format!("required by the {command} command")))?;
        if h <= 0.0 {
            return Err(ConfigError::new("numerics.horizon", format!("must be positive, got {h}")));
        }
        if step > h / 10.0 {
            return Err(ConfigError::new(
                "numerics.step",
                format!("must not exceed horizon/10 = {}, got {step}", h / 10.0),
            ));
        }
    }
    let burn_in = opt_f64(t, P, "burn_in")?;
    if let Some(b) = burn_in {
        let h = horizon.unwrap_or(f64::INFINITY);
        if b < 0.0 || b >= h {
            return Err(ConfigError::new("numerics.burn_in", "must lie in [0, horizon)"));
        }
    }
    let thin = opt_usize(t, P, "thin")?.unwrap_or(1);
    if thin == 0 {
        return Err(ConfigError::new("numerics.thin", "must be at least 1"));
    }
    let method = match opt_str(t, P, "method")? {
        None => Method::ErgodicAverage,
        Some(name) => match Method::from_name(name) {
            Some(m @ (Method::ErgodicAverage | Method::LogNormGrowth)) => m,
            _ => {
                return Err(ConfigError::new(
                    "numerics.method",
                    format!("expected ergodic_average or log_norm_growth, got {name:?}"),
                ))
            }
        },
    };
    let mode = match opt_str(t, P, "mode")? {
        None => None,
        Some("fast") => Some(ConcentrationMode::Fast),
        Some("slow") => Some(ConcentrationMode::Slow),
        Some(other) => {
            return Err(ConfigError::new("numerics.mode", format!("expected fast or slow, got {other:?}")))
        }
    };
    Ok(Numerics {
        horizon,
        step,
        burn_in,
        thin,
        method,
        mode,
    })
}

fn parse_sweep(t: &Table) -> Result<SweepConfig> {
    const P: &str = "sweep";
    check_keys(t, P, &["T_min", "T_max", "points_per_decade", "T_values"])?;
    let grid = match t.get("T_values") {
        Some(v) => {
            if ["T_min", "T_max", "points_per_decade"].iter().any(|k| t.contains_key(*k)) {
                return Err(ConfigError::new("sweep.T_values", "cannot be combined with T_min/T_max"));
            }
            SweepGrid::Explicit(f64_list(v, "sweep.T_values")?)
        }
        None => SweepGrid::LogSpaced {
            t_min: req_f64(t, P, "T_min")?,
            t_max: req_f64(t, P, "T_max")?,
            points_per_decade: opt_usize(t, P, "points_per_decade")?.unwrap_or(DEFAULT_POINTS_PER_DECADE),
        },
    };
    let t_values = match &grid {
        SweepGrid::Explicit(v) => {
            if v.is_empty() {
                return Err(ConfigError::new("sweep.T_values", "must not be empty"));
            }
            if v.iter().any(|x| *x <= 0.0) {
                return Err(ConfigError::new("sweep.T_values", "entries must be positive"));
            }
            if v.windows(2).any(|w| w[1] <= w[0]) {
                return Err(ConfigError::new("sweep.T_values", "must be strictly increasing"));
            }
            v.clone()
        }
        SweepGrid::LogSpaced {
            t_min,
            t_max,
            points_per_decade,
        } => log_spaced_grid(*t_min, *t_max, *points_per_decade)
            .map_err(|e| ConfigError::new("sweep", e.to_string()))?,
    };
    Ok(SweepConfig { grid, t_values })
}

fn parse_output(t: &Table) -> Result<OutputConfig> {
    const P: &str = "output";
    check_keys(t, P, &["path", "format", "trajectory"])?;
    let format = match opt_str(t, P, "format")? {
        None => Format::Csv,
        Some(name) => Format::from_name(name)
            .ok_or_else(|| ConfigError::new("output.format", format!("expected csv or json, got {name:?}")))?,
    };
    Ok(OutputConfig {
        path: opt_str(t, P, "path")?.map(PathBuf::from),
        format,
        trajectory: opt_str(t, P, "trajectory")?.map(PathBuf::from),
    })
}

fn matrix_value(m: &Matrix) -> Value {
    Value::Array(
        m.to_rows()
            .into_iter()
            .map(|r| Value::Array(r.into_iter().map(Value::Float).collect()))
            .collect(),
    )
}

fn float_list(v: &[f64]) -> Value {
    Value::Array(v.iter().copied().map(Value::Float).collect())
}

impl ExperimentConfig {
    /// TOML document that parses back to an equal config.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        root.insert("command".into(), Value::String(self.command.name().into()));
        root.insert(
            "seed".into(),
            match i64::try_from(self.seed) {
                Ok(s) => Value::Integer(s),
                Err(_) => Value::String(self.seed.to_string()),
            },
        );
        root.insert("environment".into(), Value::Table(self.environment.to_table()));

        let n = &self.numerics;
        let mut num = Table::new();
        if let Some(h) = n.horizon {
            num.insert("horizon".into(), Value::Float(h));
        }
        num.insert("step".into(), Value::Float(n.step));
        if let Some(b) = n.burn_in {
            num.insert("burn_in".into(), Value::Float(b));
        }
        num.insert("thin".into(), Value::Integer(n.thin as i64));
        num.insert("method".into(), Value::String(n.method.name().into()));
        if let Some(m) = n.mode {
            let name = match m {
                ConcentrationMode::Fast => "fast",
                ConcentrationMode::Slow => "slow",
            };
            num.insert("mode".into(), Value::String(name.into()));
        }
        root.insert("numerics".into(), Value::Table(num));

        if let Some(s) = &self.sweep {
            let mut sw = Table::new();
            match &s.grid {
                SweepGrid::LogSpaced {
                    t_min,
                    t_max,
                    points_per_decade,
                } => {
                    sw.insert("T_min".into(), Value::Float(*t_min));
                    sw.insert("T_max".into(), Value::Float(*t_max));
                    sw.insert("points_per_decade".into(), Value::Integer(*points_per_decade as i64));
                }
                SweepGrid::Explicit(v) => {
                    sw.insert("T_values".into(), float_list(v));
                }
            }
            root.insert("sweep".into(), Value::Table(sw));
        }

        let mut out = Table::new();
        if let Some(p) = &self.output.path {
            out.insert("path".into(), Value::String(p.display().to_string()));
        }
        out.insert("format".into(), Value::String(self.output.format.name().into()));
        if let Some(p) = &self.output.trajectory {
            out.insert("trajectory".into(), Value::String(p.display().to_string()));
        }
        root.insert("output".into(), Value::Table(out));
        toml::to_string(&root).expect("config tables always serialize")
    }
}

impl EnvironmentConfig {
    fn to_table(&self) -> Table {
        let spec = &self.spec;
        let mut t = Table::new();
        t.insert("kind".into(), Value::String(self.label.clone()));
        t.insert("timescale".into(), Value::Float(spec.timescale()));
        let torus = matches!(spec.kind(), EnvironmentKind::QuasiPeriodic { .. });
        match spec.kind() {
            EnvironmentKind::Periodic { phase } if self.label != "constant" => {
                t.insert("phase".into(), Value::Float(*phase));
            }
            EnvironmentKind::Periodic { .. } => {}
            EnvironmentKind::QuasiPeriodic {
                frequencies,
                phases,
            } => {
                t.insert("frequencies".into(), float_list(frequencies));
                t.insert("phases".into(), float_list(phases));
            }
            EnvironmentKind::CircleDiffusion {
                sigma,
                initial_point,
            } => {
                t.insert("sigma".into(), Value::Float(*sigma));
                t.insert("initial_point".into(), Value::Float(*initial_point));
            }
            EnvironmentKind::MarkovSwitch {
                rates,
                initial_state,
            } => {
                t.insert("rates".into(), matrix_value(rates));
                t.insert("initial_state".into(), Value::Integer(*initial_state as i64 + 1));
            }
        }
        match spec.map() {
            MatrixMap::Fourier(f) => {
                t.insert("A0".into(), matrix_value(f.base()));
                for h in f.harmonics() {
                    let suffix = if torus {
                        format!("{}_{}", h.order, h.axis + 1)
                    } else {
                        h.order.to_string()
                    };
                    t.insert(format!("C{suffix}"), matrix_value(&h.cos));
                    t.insert(format!("D{suffix}"), matrix_value(&h.sin));
                }
            }
            MatrixMap::Table(ms) => {
                t.insert(
                    "matrices".into(),
                    Value::Array(ms.iter().map(|m| matrix_value(m.as_matrix())).collect()),
                );
            }
        }
        t
    }
}

/// Reference for every config key, shown by `--help`.
pub const KEY_REFERENCE: &str = "\
CONFIG KEYS (TOML)
  command                      estimate | periodic-exact | floquet | bounds | sweep |
                               contraction | concentration (the positional command overrides it)
  seed                         master seed, unsigned 64-bit integer (string form allowed)

  [environment]
  kind                         constant | periodic | quasi_periodic | markov_switch | circle_diffusion
  timescale                    T > 0, the environment runs as s(t/T) (default 1)
  A0                           constant Fourier term, a d×d matrix as an array of rows
  Ck, Dk                       cos/sin coefficients of order k >= 1 (periodic, circle_diffusion)
  Ck_j, Dk_j                   same on torus axis j (quasi_periodic, j is 1-based)
  phase                        periodic: initial point on the circle (default 0)
  frequencies, phases          quasi_periodic: rotation vector and initial point (phases default 0)
  sigma, initial_point         circle_diffusion: diffusion coefficient and start (default 0)
  rates                        markov_switch: n×n jump rates, rates[i][j] from i to j, diagonal 0
                               or minus the row sum
  initial_state                markov_switch: 1-based starting state (default 1)
  matrices                     markov_switch: one d×d Metzler matrix per state

  [numerics]
  horizon                      integration horizon (all commands except periodic-exact, floquet,
                               bounds); per-T floor for sweep, which uses max(horizon, 100·T)
  step                         RK4 step, 0 < step <= horizon/10 (default 1e-3)
  burn_in                      discarded initial time, 0 <= burn_in < horizon (default 10%)
  thin                         estimate trajectory dump keeps every thin-th step (default 1)
  method                       ergodic_average | log_norm_growth (estimate; default ergodic_average)
  mode                         fast | slow reference direction for concentration (default by T <= 1)

  [sweep]                      required iff command = sweep
  T_min, T_max                 log-spaced grid endpoints, 0 < T_min < T_max
  points_per_decade            grid density (default 5)
  T_values                     explicit increasing grid instead of T_min/T_max

  [output]
  path                         result file (default: standard output)
  format                       csv | json (default csv)
  trajectory                   estimate only: CSV dump of the integrated trajectory

EXIT CODES
  0 success, 2 configuration error, 3 model assumption violated, 4 numerical failure, 5 I/O error
";
