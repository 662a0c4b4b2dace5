//! Environment processes `ω_t` on a compact state space, the map
//! `s ↦ A(s)`, and the time rescaling `ω^T_t = ω_{t/T}`.
//!
//! Four kinds are supported: a rotation of the circle, a linear flow on the
//! torus, an irreducible continuous-time Markov chain on `{1, …, n}`, and a
//! Brownian motion on the circle. The continuous kinds carry `A(s)` as a
//! truncated matrix Fourier series; the Markov kind carries one matrix per
//! state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{CoreError, Result};
use crate::linalg::{is_irreducible, solve, Matrix, MetzlerMatrix, METZLER_CLAMP};

/// Points per torus axis on which `A(s)` is checked to be Metzler.
pub const VALIDATION_GRID: usize = 1024;

/// Points of the base quadrature rule over `μ` for continuous kinds.
pub const QUADRATURE_POINTS: usize = 4096;

/// Agreement required between the base rule and its refinement before a
/// warning is logged.
pub const QUADRATURE_REFINEMENT_TOL: f64 = 1e-8;

const RATIONAL_RELATION_MAX_COEFF: i64 = 20;
const RATIONAL_RELATION_TOL: f64 = 1e-9;
const RATIONAL_RELATION_MAX_AXES: usize = 4;

/// Point of the environment state space.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    /// Point of `ℝ/ℤ`, in `[0, 1)`.
    Circle(f64),
    /// Point of the torus `(ℝ/ℤ)ⁿ`, each coordinate in `[0, 1)`.
    Torus(Vec<f64>),
    /// Zero-based index of a Markov chain state.
    Discrete(usize),
}

impl std::fmt::Display for EnvState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvState::Circle(s) => write!(f, "s={s}"),
            EnvState::Torus(s) => write!(f, "s={s:?}"),
            EnvState::Discrete(i) => write!(f, "state {}", i + 1),
        }
    }
}

/// One harmonic `C cos(2πk x) + D sin(2πk x)` acting on torus axis `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Harmonic {
    pub axis: usize,
    pub order: u32,
    pub cos: Matrix,
    pub sin: Matrix,
}

/// `A(s) = A₀ + Σ_h (C_h cos(2π k_h s_{axis_h}) + D_h sin(2π k_h s_{axis_h}))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMap {
    base: Matrix,
    harmonics: Vec<Harmonic>,
}

impl FourierMap {
    pub fn constant(base: Matrix) -> Self {
        Self {
            base,
            harmonics: Vec::new(),
        }
    }

    pub fn new(base: Matrix, harmonics: Vec<Harmonic>) -> Result<Self> {
        let mut map = Self::constant(base);
        for h in harmonics {
            map = map.with_harmonic(h.axis, h.order, Some(h.cos), Some(h.sin))?;
        }
        Ok(map)
    }

    /// Adds a harmonic; a missing coefficient is zero.
    pub fn with_harmonic(
        mut self,
        axis: usize,
        order: u32,
        cos: Option<Matrix>,
        sin: Option<Matrix>,
    ) -> Result<Self> {
        let d = self.base.dim();
        if order == 0 {
            return Err(CoreError::Parameter("harmonic order must be at least 1".into()));
        }
        let cos = cos.unwrap_or_else(|| Matrix::zeros(d));
        let sin = sin.unwrap_or_else(|| Matrix::zeros(d));
        for m in [&cos, &sin] {
            if m.dim() != d {
                return Err(CoreError::DimensionMismatch {
                    expected: d,
                    found: m.dim(),
                });
            }
            if !m.is_finite() {
                return Err(CoreError::InvalidMatrix("non-finite Fourier coefficient".into()));
            }
        }
        self.harmonics.push(Harmonic {
            axis,
            order,
            cos,
            sin,
        });
        Ok(self)
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn harmonics(&self) -> &[Harmonic] {
        &self.harmonics
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Number of torus axes the harmonics refer to.
    pub fn axes(&self) -> usize {
        self.harmonics.iter().map(|h| h.axis + 1).max().unwrap_or(1)
    }

    /// `out = A(coords)`.
    pub fn eval_into(&self, coords: &[f64], out: &mut Matrix) {
        out.as_mut_slice().copy_from_slice(self.base.as_slice());
        for h in &self.harmonics {
            let x = coords[h.axis];
            let (s, c) = (std::f64::consts::TAU * h.order as f64 * x).sin_cos();
            for ((o, cv), sv) in out
                .as_mut_slice()
                .iter_mut()
                .zip(h.cos.as_slice())
                .zip(h.sin.as_slice())
            {
                *o += c * cv + s * sv;
            }
        }
    }

    /// Contribution of the harmonics on one axis at coordinate `x`.
    fn axis_term_into(&self, axis: usize, x: f64, out: &mut Matrix) {
        out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        for h in self.harmonics.iter().filter(|h| h.axis == axis) {
            let (s, c) = (std::f64::consts::TAU * h.order as f64 * x).sin_cos();
            for ((o, cv), sv) in out
                .as_mut_slice()
                .iter_mut()
                .zip(h.cos.as_slice())
                .zip(h.sin.as_slice())
            {
                *o += c * cv + s * sv;
            }
        }
    }

    fn map_matrices(&self, f: &impl Fn(&Matrix) -> Matrix) -> Self {
        Self {
            base: f(&self.base),
            harmonics: self.harmonics.clone(),
        }
    }
}

/// Specification of `s ↦ A(s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixMap {
    Fourier(FourierMap),
    /// One matrix per Markov state.
    Table(Vec<MetzlerMatrix>),
}

impl MatrixMap {
    pub fn dim(&self) -> usize {
        match self {
            MatrixMap::Fourier(f) => f.dim(),
            MatrixMap::Table(t) => t.first().map_or(0, |m| m.dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvironmentKind {
    /// `ω_t = s₀ + t (mod 1)`.
    Periodic { phase: f64 },
    /// `ω_t = s + t·a (mod 1)` on the `n`-torus.
    QuasiPeriodic {
        frequencies: Vec<f64>,
        phases: Vec<f64>,
    },
    /// Continuous-time Markov chain with generator `rates` (diagonal holds
    /// minus the off-diagonal row sum); `initial_state` is zero-based.
    MarkovSwitch { rates: Matrix, initial_state: usize },
    /// `ω_t = x₀ + σ W_t (mod 1)`.
    CircleDiffusion { sigma: f64, initial_point: f64 },
}

impl EnvironmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvironmentKind::Periodic { .. } => "periodic",
            EnvironmentKind::QuasiPeriodic { .. } => "quasi_periodic",
            EnvironmentKind::MarkovSwitch { .. } => "markov_switch",
            EnvironmentKind::CircleDiffusion { .. } => "circle_diffusion",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            EnvironmentKind::Periodic { .. } | EnvironmentKind::QuasiPeriodic { .. }
        )
    }
}

/// Invariant probability of the environment.
#[derive(Debug, Clone, PartialEq)]
pub enum InvariantMeasure {
    /// Normalized Lebesgue measure on the circle (`axes = 1`) or torus.
    Lebesgue { axes: usize },
    /// Probability vector over the Markov states.
    Discrete(Vec<f64>),
}

/// Validated environment description. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    kind: EnvironmentKind,
    map: MatrixMap,
    timescale: f64,
    stationary: Option<Vec<f64>>,
}

impl EnvironmentSpec {
    pub fn new(kind: EnvironmentKind, map: MatrixMap, timescale: f64) -> Result<Self> {
        if !(timescale > 0.0) || !timescale.is_finite() {
            return Err(CoreError::Parameter(format!(
                "timescale must be positive and finite, got {timescale}"
            )));
        }
        let (kind, stationary) = validate_kind(kind, &map)?;
        let spec = Self {
            kind,
            map,
            timescale,
            stationary,
        };
        spec.validate_map()?;
        Ok(spec)
    }

    /// Constant environment `A(s) ≡ a`, expressed as a periodic system with
    /// no harmonics.
    pub fn constant(a: MetzlerMatrix) -> Self {
        Self::new(
            EnvironmentKind::Periodic { phase: 0.0 },
            MatrixMap::Fourier(FourierMap::constant(a.into_inner())),
            1.0,
        )
        .expect("a Metzler matrix is a valid constant environment")
    }

    pub fn periodic(phase: f64, map: FourierMap) -> Result<Self> {
        Self::new(
            EnvironmentKind::Periodic { phase },
            MatrixMap::Fourier(map),
            1.0,
        )
    }

    pub fn quasi_periodic(frequencies: Vec<f64>, phases: Vec<f64>, map: FourierMap) -> Result<Self> {
        Self::new(
            EnvironmentKind::QuasiPeriodic {
                frequencies,
                phases,
            },
            MatrixMap::Fourier(map),
            1.0,
        )
    }

    /// `rates[i][j]` is the jump rate from state `i` to state `j`.
    pub fn markov_switch(
        rates: Matrix,
        initial_state: usize,
        matrices: Vec<MetzlerMatrix>,
    ) -> Result<Self> {
        Self::new(
            EnvironmentKind::MarkovSwitch {
                rates,
                initial_state,
            },
            MatrixMap::Table(matrices),
            1.0,
        )
    }

    pub fn circle_diffusion(sigma: f64, initial_point: f64, map: FourierMap) -> Result<Self> {
        Self::new(
            EnvironmentKind::CircleDiffusion {
                sigma,
                initial_point,
            },
            MatrixMap::Fourier(map),
            1.0,
        )
    }

    /// Same environment run at speed `1/T`.
    pub fn with_timescale(&self, timescale: f64) -> Result<Self> {
        if !(timescale > 0.0) || !timescale.is_finite() {
            return Err(CoreError::Parameter(format!(
                "timescale must be positive and finite, got {timescale}"
            )));
        }
        let mut spec = self.clone();
        spec.timescale = timescale;
        Ok(spec)
    }

    /// Same environment with `A(s)` replaced by `A(s) + cI`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut spec = self.clone();
        spec.map = match &self.map {
            MatrixMap::Fourier(f) => MatrixMap::Fourier(f.map_matrices(&|m| m.add_identity(c))),
            MatrixMap::Table(t) => MatrixMap::Table(t.iter().map(|m| m.shifted(c)).collect()),
        };
        spec
    }

    pub fn kind(&self) -> &EnvironmentKind {
        &self.kind
    }

    pub fn map(&self) -> &MatrixMap {
        &self.map
    }

    pub fn timescale(&self) -> f64 {
        self.timescale
    }

    /// System dimension `d`.
    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    /// Number of torus axes for continuous kinds, number of states for the
    /// Markov kind.
    pub fn state_count(&self) -> usize {
        match (&self.kind, &self.map) {
            (EnvironmentKind::QuasiPeriodic { frequencies, .. }, _) => frequencies.len(),
            (_, MatrixMap::Table(t)) => t.len(),
            _ => 1,
        }
    }

    /// `A(s)` without Metzler re-validation. For hot loops; see [`matrix_at`].
    pub fn matrix_into(&self, state: &EnvState, out: &mut Matrix) {
        match (&self.map, state) {
            (MatrixMap::Table(t), EnvState::Discrete(i)) => {
                out.as_mut_slice().copy_from_slice(t[*i].as_slice())
            }
            (MatrixMap::Fourier(f), EnvState::Circle(s)) => f.eval_into(std::slice::from_ref(s), out),
            (MatrixMap::Fourier(f), EnvState::Torus(s)) => f.eval_into(s, out),
            _ => unreachable!("state kind checked by caller"),
        }
    }

    fn check_state(&self, state: &EnvState) -> Result<()> {
        let ok = match (&self.kind, state) {
            (EnvironmentKind::Periodic { .. } | EnvironmentKind::CircleDiffusion { .. }, EnvState::Circle(s)) => {
                s.is_finite()
            }
            (EnvironmentKind::QuasiPeriodic { frequencies, .. }, EnvState::Torus(s)) => {
                s.len() == frequencies.len() && s.iter().all(|v| v.is_finite())
            }
            (EnvironmentKind::MarkovSwitch { .. }, EnvState::Discrete(i)) => *i < self.state_count(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::Domain(format!(
                "state {state:?} is not compatible with a {} environment",
                self.kind.name()
            )))
        }
    }

    /// Checks `A(s)` is Metzler on the validation grid. For Fourier maps each
    /// entry is a sum of per-axis terms, so its minimum over the product grid
    /// is the sum of per-axis minima.
    fn validate_map(&self) -> Result<()> {
        let f = match &self.map {
            MatrixMap::Table(_) => return Ok(()),
            MatrixMap::Fourier(f) => f,
        };
        let d = f.dim();
        let axes = match &self.kind {
            EnvironmentKind::QuasiPeriodic { frequencies, .. } => frequencies.len(),
            _ => 1,
        };
        // min over grid per axis and entry, with argmin
        let mut mins = vec![vec![(f64::INFINITY, 0.0f64); d * d]; axes];
        let mut term = Matrix::zeros(d);
        for (axis, axis_mins) in mins.iter_mut().enumerate() {
            for k in 0..VALIDATION_GRID {
                let x = k as f64 / VALIDATION_GRID as f64;
                f.axis_term_into(axis, x, &mut term);
                for (slot, v) in term.as_slice().iter().enumerate() {
                    if *v < axis_mins[slot].0 {
                        axis_mins[slot] = (*v, x);
                    }
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let slot = i * d + j;
                let worst = f.base()[(i, j)] + mins.iter().map(|m| m[slot].0).sum::<f64>();
                if worst < -METZLER_CLAMP {
                    let coords: Vec<f64> = mins.iter().map(|m| m[slot].1).collect();
                    let state = if axes == 1 && !matches!(self.kind, EnvironmentKind::QuasiPeriodic { .. }) {
                        EnvState::Circle(coords[0])
                    } else {
                        EnvState::Torus(coords)
                    };
                    return Err(CoreError::MetzlerViolation {
                        row: i,
                        col: j,
                        value: worst,
                        context: format!(" of A(s) at {state}"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn validate_kind(
    kind: EnvironmentKind,
    map: &MatrixMap,
) -> Result<(EnvironmentKind, Option<Vec<f64>>)> {
    let kind_name = kind.name();
    let fourier_axes = |map: &MatrixMap| match map {
        MatrixMap::Fourier(f) => Ok(f.axes()),
        MatrixMap::Table(_) => Err(CoreError::Parameter(format!(
            "a {kind_name} environment needs a Fourier matrix map"
        ))),
    };
    let check_unit = |name: &str, v: f64| {
        if v.is_finite() {
            Ok(v.rem_euclid(1.0))
        } else {
            Err(CoreError::Parameter(format!("{name} must be finite")))
        }
    };
    match kind {
        EnvironmentKind::Periodic { phase } => {
            if fourier_axes(map)? > 1 {
                return Err(CoreError::Parameter(
                    "periodic environments have a single axis".into(),
                ));
            }
            let phase = check_unit("phase", phase)?;
            Ok((EnvironmentKind::Periodic { phase }, None))
        }
        EnvironmentKind::CircleDiffusion {
            sigma,
            initial_point,
        } => {
            if fourier_axes(map)? > 1 {
                return Err(CoreError::Parameter(
                    "circle diffusions have a single axis".into(),
                ));
            }
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(CoreError::Parameter(format!(
                    "sigma must be positive and finite, got {sigma}"
                )));
            }
            let initial_point = check_unit("initial_point", initial_point)?;
            Ok((
                EnvironmentKind::CircleDiffusion {
                    sigma,
                    initial_point,
                },
                None,
            ))
        }
        EnvironmentKind::QuasiPeriodic {
            frequencies,
            phases,
        } => {
            let axes = fourier_axes(map)?;
            if frequencies.is_empty() {
                return Err(CoreError::Parameter("frequencies must not be empty".into()));
            }
            if phases.len() != frequencies.len() {
                return Err(CoreError::Parameter(format!(
                    "{} phases given for {} frequencies",
                    phases.len(),
                    frequencies.len()
                )));
            }
            if axes > frequencies.len() {
                return Err(CoreError::Parameter(format!(
                    "a harmonic refers to axis {} but the torus has {} axes",
                    axes,
                    frequencies.len()
                )));
            }
            if frequencies.iter().any(|a| !a.is_finite()) {
                return Err(CoreError::Parameter("frequencies must be finite".into()));
            }
            let phases = phases
                .iter()
                .map(|p| check_unit("phase", *p))
                .collect::<Result<Vec<_>>>()?;
            if frequencies.len() > RATIONAL_RELATION_MAX_AXES {
                log::warn!(
                    "rational independence of {} frequencies not checked (more than {} axes)",
                    frequencies.len(),
                    RATIONAL_RELATION_MAX_AXES
                );
            } else if let Some(k) = find_rational_relation(&frequencies) {
                log::warn!(
                    "frequencies {frequencies:?} look rationally dependent: coefficients {k:?}"
                );
            }
            Ok((
                EnvironmentKind::QuasiPeriodic {
                    frequencies,
                    phases,
                },
                None,
            ))
        }
        EnvironmentKind::MarkovSwitch {
            rates,
            initial_state,
        } => {
            let table = match map {
                MatrixMap::Table(t) => t,
                MatrixMap::Fourier(_) => {
                    return Err(CoreError::Parameter(
                        "a markov_switch environment needs one matrix per state".into(),
                    ))
                }
            };
            let n = rates.dim();
            if table.len() != n {
                return Err(CoreError::Parameter(format!(
                    "{} matrices given for {n} states",
                    table.len()
                )));
            }
            let d = table[0].dim();
            if let Some(m) = table.iter().find(|m| m.dim() != d) {
                return Err(CoreError::DimensionMismatch {
                    expected: d,
                    found: m.dim(),
                });
            }
            if initial_state >= n {
                return Err(CoreError::Parameter(format!(
                    "initial_state {} out of range 1..={n}",
                    initial_state + 1
                )));
            }
            let generator = conservative_generator(&rates)?;
            let stationary = stationary_distribution(&generator)?;
            Ok((
                EnvironmentKind::MarkovSwitch {
                    rates: generator,
                    initial_state,
                },
                Some(stationary),
            ))
        }
    }
}

/// Fills the diagonal with minus the off-diagonal row sums. A given diagonal
/// must be zero or already conservative.
pub fn conservative_generator(rates: &Matrix) -> Result<Matrix> {
    if !rates.is_finite() {
        return Err(CoreError::Parameter("rates must be finite".into()));
    }
    let n = rates.dim();
    let mut q = rates.clone();
    for i in 0..n {
        let mut out = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = rates[(i, j)];
            if v < 0.0 {
                return Err(CoreError::Parameter(format!(
                    "rates[{i}][{j}] = {v} must be nonnegative"
                )));
            }
            out += v;
        }
        let diag = rates[(i, i)];
        if diag != 0.0 && (diag + out).abs() > 1e-12 * (1.0 + out) {
            return Err(CoreError::Parameter(format!(
                "rates[{i}][{i}] = {diag} must be 0 or minus the off-diagonal row sum {out}"
            )));
        }
        q[(i, i)] = -out;
    }
    Ok(q)
}

/// Probability vector `μ` with `μQ = 0`, by Gaussian elimination with the
/// last balance equation replaced by `Σμ = 1`.
pub fn stationary_distribution(generator: &Matrix) -> Result<Vec<f64>> {
    let n = generator.dim();
    if !is_irreducible(generator) {
        return Err(CoreError::Reducible(format!(
            "rate matrix {generator} is not irreducible"
        )));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mut system = generator.transpose();
    for j in 0..n {
        system[(n - 1, j)] = 1.0;
    }
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = 1.0;
    let mu = solve(&system, &rhs)
        .ok_or_else(|| CoreError::NumericalBlowup("singular balance equations".into()))?;
    let mu: Vec<f64> = mu.into_iter().map(|p| p.max(0.0)).collect();
    let total: f64 = mu.iter().sum();
    Ok(mu.into_iter().map(|p| p / total).collect())
}

/// Smallest integer vector `|k_i| ≤ 20`, not all zero, with `|Σ k_i a_i| < 1e-9`.
pub fn find_rational_relation(frequencies: &[f64]) -> Option<Vec<i64>> {
    let n = frequencies.len();
    let range = 2 * RATIONAL_RELATION_MAX_COEFF + 1;
    let total = (range as u64).checked_pow(n as u32)?;
    let mut k = vec![0i64; n];
    let mut best = None;
    for code in 0..total {
        let mut c = code;
        for slot in k.iter_mut() {
            *slot = (c % range as u64) as i64 - RATIONAL_RELATION_MAX_COEFF;
            c /= range as u64;
        }
        // k and -k give the same relation; keep the one whose first nonzero is positive
        match k.iter().find(|v| **v != 0) {
            Some(first) if *first > 0 => {}
            _ => continue,
        }
        let s: f64 = k.iter().zip(frequencies).map(|(ki, a)| *ki as f64 * a).sum();
        if s.abs() < RATIONAL_RELATION_TOL {
            let size = |v: &[i64]| v.iter().map(|x| x.abs()).sum::<i64>();
            if best.as_ref().is_none_or(|b: &Vec<i64>| size(&k) < size(b)) {
                best = Some(k.clone());
            }
        }
    }
    best
}

/// State of the environment at time `t` for the path determined by `seed`.
pub fn env_state_at(spec: &EnvironmentSpec, seed: u64, t: f64) -> Result<EnvState> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(CoreError::Domain(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(EnvironmentPath::new(spec, seed).state_at(t))
}

pub fn invariant_measure(spec: &EnvironmentSpec) -> InvariantMeasure {
    match (&spec.kind, &spec.stationary) {
        (EnvironmentKind::MarkovSwitch { .. }, Some(mu)) => InvariantMeasure::Discrete(mu.clone()),
        (EnvironmentKind::QuasiPeriodic { frequencies, .. }, _) => InvariantMeasure::Lebesgue {
            axes: frequencies.len(),
        },
        _ => InvariantMeasure::Lebesgue { axes: 1 },
    }
}

/// Validated `A(s)`.
pub fn matrix_at(spec: &EnvironmentSpec, state: &EnvState) -> Result<MetzlerMatrix> {
    spec.check_state(state)?;
    let mut out = Matrix::zeros(spec.dim());
    spec.matrix_into(state, &mut out);
    MetzlerMatrix::with_context(out, &format!(" of A(s) at {state}"))
}

/// `Ā = ∫ A(s) μ(ds)`.
///
/// For Fourier maps every harmonic integrates to zero, so `Ā = A₀`; this is
/// cross-checked against the equispaced rule on [`QUADRATURE_POINTS`] points
/// per axis.
pub fn average_matrix(spec: &EnvironmentSpec) -> Result<MetzlerMatrix> {
    match &spec.map {
        MatrixMap::Table(table) => {
            let mu = spec.stationary.as_ref().expect("markov spec has a stationary law");
            let d = spec.dim();
            let mut avg = Matrix::zeros(d);
            for (w, m) in mu.iter().zip(table) {
                avg = avg.add(&m.scaled(*w));
            }
            MetzlerMatrix::new(avg)
        }
        MatrixMap::Fourier(f) => {
            let d = f.dim();
            let mut term = Matrix::zeros(d);
            let axes = spec.state_count().max(f.axes());
            for axis in 0..axes {
                let mut acc = vec![0.0; d * d];
                for k in 0..QUADRATURE_POINTS {
                    f.axis_term_into(axis, k as f64 / QUADRATURE_POINTS as f64, &mut term);
                    for (a, v) in acc.iter_mut().zip(term.as_slice()) {
                        *a += v;
                    }
                }
                let scale = 1.0 + f.harmonics().iter().map(|h| h.cos.max_abs() + h.sin.max_abs()).sum::<f64>();
                let worst = acc
                    .iter()
                    .fold(0.0f64, |m, v| m.max((v / QUADRATURE_POINTS as f64).abs()));
                if worst > 1e-10 * scale {
                    return Err(CoreError::NumericalBlowup(format!(
                        "harmonics on axis {axis} average to {worst:e}, expected 0"
                    )));
                }
            }
            MetzlerMatrix::new(f.base().clone())
        }
    }
}

/// Result of integrating pointwise functionals of `A(s)` against `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureAverage {
    pub values: Vec<f64>,
    /// Largest difference between the base rule and its refinement; zero
    /// for the exact Markov sums.
    pub refinement_gap: f64,
}

/// `∫ f(A(s), s) μ(ds)` for a vector-valued `f`.
///
/// Markov environments use the exact weighted sum. Continuous kinds use the
/// equispaced (periodic trapezoid) rule with [`QUADRATURE_POINTS`] points in
/// total, refined to twice as many; a disagreement above
/// [`QUADRATURE_REFINEMENT_TOL`] is logged and the refined value returned.
pub fn measure_average<F>(spec: &EnvironmentSpec, mut f: F) -> Result<MeasureAverage>
where
    F: FnMut(&Matrix, &EnvState) -> Result<Vec<f64>>,
{
    let d = spec.dim();
    let mut a = Matrix::zeros(d);
    if let MatrixMap::Table(_) = spec.map {
        let mu = spec.stationary.as_ref().expect("markov spec has a stationary law");
        let mut acc: Vec<f64> = Vec::new();
        for (i, w) in mu.iter().enumerate() {
            let state = EnvState::Discrete(i);
            spec.matrix_into(&state, &mut a);
            let v = f(&a, &state)?;
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (s, x) in acc.iter_mut().zip(v) {
                *s += w * x;
            }
        }
        return Ok(MeasureAverage {
            values: acc,
            refinement_gap: 0.0,
        });
    }
    let axes = spec.state_count();
    let per_axis = |total: usize| ((total as f64).powf(1.0 / axes as f64).round() as usize).max(2);
    let coarse = grid_average(spec, per_axis(QUADRATURE_POINTS), &mut a, &mut f)?;
    let fine = grid_average(spec, per_axis(2 * QUADRATURE_POINTS), &mut a, &mut f)?;
    let gap = coarse
        .iter()
        .zip(&fine)
        .fold(0.0f64, |m, (c, r)| m.max((c - r).abs()));
    if gap > QUADRATURE_REFINEMENT_TOL {
        log::warn!("quadrature refinement changed the result by {gap:e}");
    }
    Ok(MeasureAverage {
        values: fine,
        refinement_gap: gap,
    })
}

fn grid_average<F>(spec: &EnvironmentSpec, m: usize, a: &mut Matrix, f: &mut F) -> Result<Vec<f64>>
where
    F: FnMut(&Matrix, &EnvState) -> Result<Vec<f64>>,
{
    let torus = matches!(spec.kind, EnvironmentKind::QuasiPeriodic { .. });
    let axes = spec.state_count();
    let total = m.pow(axes as u32);
    let mut acc: Vec<f64> = Vec::new();
    let mut coords = vec![0.0; axes];
    for code in 0..total {
        let mut c = code;
        for x in coords.iter_mut() {
            *x = (c % m) as f64 / m as f64;
            c /= m;
        }
        let state = if torus {
            EnvState::Torus(coords.clone())
        } else {
            EnvState::Circle(coords[0])
        };
        spec.matrix_into(&state, a);
        let v = f(a, &state)?;
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (s, x) in acc.iter_mut().zip(v) {
            *s += x;
        }
    }
    Ok(acc.into_iter().map(|s| s / total as f64).collect())
}

/// Jump chain of a Markov environment, generated lazily from its seed.
///
/// Only the frontier `(last jump, current state, next jump)` is kept; a
/// query earlier than the frontier replays the chain from the seed, so
/// memory stays constant however long the horizon.
#[derive(Debug, Clone)]
pub struct MarkovPath {
    seed: u64,
    rng: ChaCha8Rng,
    exit_rates: Vec<f64>,
    rates: Matrix,
    timescale: f64,
    initial_state: usize,
    /// Unscaled time of the last jump taken (0 at the start).
    last_jump: f64,
    state: usize,
    /// Unscaled time of the next jump; `∞` for an absorbing state.
    next_jump: f64,
}

impl MarkovPath {
    fn new(rates: &Matrix, initial_state: usize, timescale: f64, seed: u64) -> Self {
        let exit_rates = (0..rates.dim()).map(|i| -rates[(i, i)]).collect();
        let mut path = Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            exit_rates,
            rates: rates.clone(),
            timescale,
            initial_state,
            last_jump: 0.0,
            state: initial_state,
            next_jump: 0.0,
        };
        path.next_jump = path.holding_time(initial_state);
        path
    }

    fn reset(&mut self) {
        *self = Self::new(&self.rates, self.initial_state, self.timescale, self.seed);
    }

    fn holding_time(&mut self, state: usize) -> f64 {
        let q = self.exit_rates[state];
        if q > 0.0 {
            Exp::new(q).expect("positive rate").sample(&mut self.rng)
        } else {
            f64::INFINITY
        }
    }

    fn advance(&mut self) {
        let from = self.state;
        let q = self.exit_rates[from];
        let mut u = self.rng.random::<f64>() * q;
        let mut to = from;
        for j in 0..self.rates.dim() {
            if j == from {
                continue;
            }
            let r = self.rates[(from, j)];
            if r <= 0.0 {
                continue;
            }
            to = j;
            if u < r {
                break;
            }
            u -= r;
        }
        self.last_jump = self.next_jump;
        self.state = to;
        self.next_jump = self.last_jump + self.holding_time(to);
    }

    /// Real time of jump at unscaled time `u`.
    #[inline]
    fn real(&self, u: f64) -> f64 {
        self.timescale * u
    }

    /// State at real time `t` (right-continuous).
    pub fn state_at(&mut self, t: f64) -> usize {
        if t < self.real(self.last_jump) {
            self.reset();
        }
        while self.real(self.next_jump) <= t {
            self.advance();
        }
        self.state
    }

    /// First jump strictly after real time `t`, or `∞`.
    pub fn next_jump_after(&mut self, t: f64) -> f64 {
        self.state_at(t);
        self.real(self.next_jump)
    }

    /// All real jump times in `[0, horizon]`, replayed from the seed.
    pub fn jump_times(&mut self, horizon: f64) -> Vec<f64> {
        self.reset();
        let mut times = Vec::new();
        while self.real(self.next_jump) <= horizon {
            self.advance();
            times.push(self.real(self.last_jump));
        }
        times
    }
}

/// Euler–Maruyama path of `x₀ + σ W` on the universal cover of the circle,
/// on the grid `n · h_env` in unscaled time, with `h_env = min(1e-3, 0.01/σ²)`.
/// Like [`MarkovPath`] it keeps only the frontier and replays on a backward
/// query.
#[derive(Debug, Clone)]
pub struct CirclePath {
    seed: u64,
    rng: ChaCha8Rng,
    sigma: f64,
    step: f64,
    timescale: f64,
    initial_point: f64,
    index: u64,
    value: f64,
}

impl CirclePath {
    fn new(sigma: f64, initial_point: f64, timescale: f64, seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sigma,
            step: env_step(sigma),
            timescale,
            initial_point,
            index: 0,
            value: initial_point,
        }
    }

    /// Grid spacing in real time.
    pub fn real_step(&self) -> f64 {
        self.step * self.timescale
    }

    /// Point at the grid time nearest to real time `t`.
    pub fn state_at(&mut self, t: f64) -> f64 {
        let target = (t / self.timescale / self.step).round() as u64;
        if target < self.index {
            *self = Self::new(self.sigma, self.initial_point, self.timescale, self.seed);
        }
        let scale = self.sigma * self.step.sqrt();
        while self.index < target {
            let xi: f64 = self.rng.sample(StandardNormal);
            self.value += scale * xi;
            self.index += 1;
        }
        self.value.rem_euclid(1.0)
    }
}

/// Environment grid step `min(1e-3, 0.01/σ²)` in unscaled time.
pub fn env_step(sigma: f64) -> f64 {
    (1e-3f64).min(0.01 / (sigma * sigma))
}

/// A realisation of the environment process for one seed.
#[derive(Debug, Clone)]
pub struct EnvironmentPath<'a> {
    spec: &'a EnvironmentSpec,
    source: PathSource,
}

#[derive(Debug, Clone)]
enum PathSource {
    Deterministic,
    Markov(MarkovPath),
    Diffusion(CirclePath),
}

impl<'a> EnvironmentPath<'a> {
    pub fn new(spec: &'a EnvironmentSpec, seed: u64) -> Self {
        let source = match &spec.kind {
            EnvironmentKind::Periodic { .. } | EnvironmentKind::QuasiPeriodic { .. } => {
                PathSource::Deterministic
            }
            EnvironmentKind::MarkovSwitch {
                rates,
                initial_state,
            } => PathSource::Markov(MarkovPath::new(rates, *initial_state, spec.timescale, seed)),
            EnvironmentKind::CircleDiffusion {
                sigma,
                initial_point,
            } => PathSource::Diffusion(CirclePath::new(*sigma, *initial_point, spec.timescale, seed)),
        };
        Self { spec, source }
    }

    pub fn spec(&self) -> &'a EnvironmentSpec {
        self.spec
    }

    pub fn state_at(&mut self, t: f64) -> EnvState {
        let u = t / self.spec.timescale;
        match (&mut self.source, &self.spec.kind) {
            (PathSource::Deterministic, EnvironmentKind::Periodic { phase }) => {
                EnvState::Circle((phase + u).rem_euclid(1.0))
            }
            (
                PathSource::Deterministic,
                EnvironmentKind::QuasiPeriodic {
                    frequencies,
                    phases,
                },
            ) => EnvState::Torus(
                phases
                    .iter()
                    .zip(frequencies)
                    .map(|(p, a)| (p + a * u).rem_euclid(1.0))
                    .collect(),
            ),
            (PathSource::Markov(p), _) => EnvState::Discrete(p.state_at(t)),
            (PathSource::Diffusion(p), _) => EnvState::Circle(p.state_at(t)),
            _ => unreachable!("path source matches the spec kind"),
        }
    }

    /// `A(ω_t)` written into `out`.
    pub fn matrix_at_time(&mut self, t: f64, out: &mut Matrix) {
        let u = t / self.spec.timescale;
        match (&mut self.source, &self.spec.kind, &self.spec.map) {
            (PathSource::Deterministic, EnvironmentKind::Periodic { phase }, MatrixMap::Fourier(f)) => {
                f.eval_into(&[(phase + u).rem_euclid(1.0)], out)
            }
            (PathSource::Markov(p), _, MatrixMap::Table(t_)) => {
                let i = p.state_at(t);
                out.as_mut_slice().copy_from_slice(t_[i].as_slice());
            }
            (PathSource::Diffusion(p), _, MatrixMap::Fourier(f)) => f.eval_into(&[p.state_at(t)], out),
            _ => {
                let state = self.state_at(t);
                self.spec.matrix_into(&state, out);
            }
        }
    }

    /// First environment discontinuity strictly after `t` (Markov jumps),
    /// or `∞`.
    pub fn next_breakpoint(&mut self, t: f64) -> f64 {
        match &mut self.source {
            PathSource::Markov(p) => p.next_jump_after(t),
            _ => f64::INFINITY,
        }
    }

    /// Largest RK4 step allowed by the environment (the diffusion grid).
    pub fn max_step(&self) -> f64 {
        match &self.source {
            PathSource::Diffusion(p) => p.real_step(),
            _ => f64::INFINITY,
        }
    }

    /// Whether `A(ω)` must be treated as constant across each RK4 step.
    pub fn frozen_per_step(&self) -> bool {
        !matches!(self.source, PathSource::Deterministic)
    }

    pub fn markov(&mut self) -> Option<&mut MarkovPath> {
        match &mut self.source {
            PathSource::Markov(p) => Some(p),
            _ => None,
        }
    }
}
