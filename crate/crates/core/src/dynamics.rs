//! Fixed-step RK4 integration of the projective flow
//! `dθ/dt = A(ω_t)θ − ⟨A(ω_t)θ, 1⟩θ` together with the log-growth
//! `d log ρ/dt = ⟨A(ω_t)θ, 1⟩`, and of the fundamental matrix
//! `dM/dt = A(ω_t)M`.
//!
//! Steps are split exactly at Markov jump times so every RK4 step sees a
//! constant matrix. Deterministic environments are evaluated at the RK4
//! stage times; diffusion environments are frozen at the left endpoint of
//! each step, with the step capped at the environment grid spacing.

use std::io::{self, Write};

use crate::environment::{EnvironmentPath, EnvironmentSpec};
use crate::error::{CoreError, Result};
use crate::linalg::{hilbert_distance, matmul_into, Matrix, SimplexPoint};

/// Negative θ components above `-THETA_CLIP` are zeroed after each step;
/// anything below is a numerical failure.
pub const THETA_CLIP: f64 = 1e-10;

/// Same for fundamental-matrix entries.
pub const MATRIX_CLIP: f64 = 1e-12;

/// Default integration step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// `F(θ) = Aθ − ⟨Aθ, 1⟩θ`.
pub fn vector_field(a: &Matrix, theta: &SimplexPoint) -> Result<Vec<f64>> {
    if a.dim() != theta.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: a.dim(),
            found: theta.dim(),
        });
    }
    let mut out = vec![0.0; a.dim()];
    field_into(a, theta.coords(), &mut out);
    Ok(out)
}

/// Writes `F(θ)` into `out` and returns the growth rate `⟨Aθ, 1⟩`.
#[inline]
fn field_into(a: &Matrix, theta: &[f64], out: &mut [f64]) -> f64 {
    a.mul_vec_into(theta, out);
    let g: f64 = out.iter().sum();
    for (o, t) in out.iter_mut().zip(theta) {
        *o -= g * t;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub horizon: f64,
    pub step: f64,
    /// Record every `thin`-th grid point (the final time is always recorded).
    pub thin: usize,
}

impl IntegrationOptions {
    pub fn new(horizon: f64, step: f64) -> Self {
        Self {
            horizon,
            step,
            thin: 1,
        }
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(CoreError::Parameter(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(CoreError::Parameter(format!(
                "step must be positive and finite, got {}",
                self.step
            )));
        }
        if self.step >= self.horizon {
            return Err(CoreError::Parameter(format!(
                "step {} must be smaller than the horizon {}",
                self.step, self.horizon
            )));
        }
        if self.thin == 0 {
            return Err(CoreError::Parameter("thin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sampled trajectory of the projective flow.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub sample_times: Vec<f64>,
    pub theta_samples: Vec<SimplexPoint>,
    pub log_rho: Vec<f64>,
    /// Running average of `⟨A(ω_u)θ_u, 1⟩` over `[0, t]`; at `t = 0` the
    /// instantaneous value.
    pub growth_integrand_avg: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.sample_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_times.is_empty()
    }

    /// Largest `|Σθ − 1|` over the recorded samples.
    pub fn max_simplex_defect(&self) -> f64 {
        self.theta_samples
            .iter()
            .map(|t| (t.coords().iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with header `time,theta_1..theta_d,log_rho,running_avg`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.theta_samples.first().map_or(0, |t| t.dim());
        let mut header = vec!["time".to_string()];
        header.extend((1..=d).map(|i| format!("theta_{i}")));
        header.push("log_rho".into());
        header.push("running_avg".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt_f64(self.sample_times[k])];
            row.extend(self.theta_samples[k].coords().iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.log_rho[k]));
            row.push(fmt_f64(self.growth_integrand_avg[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Floating-point value with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One recorded point of a streamed trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub t: f64,
    pub theta: &'a [f64],
    pub log_rho: f64,
}

/// Matrices for the three distinct RK4 stage times of one step, centered
/// by their mean diagonal. The removed scalar parts are kept in `shift` and
/// integrated separately, which makes every stepper exactly equivariant
/// under `A ↦ A + cI`.
pub(crate) struct StageMatrices {
    start: Matrix,
    mid: Matrix,
    end: Matrix,
    shift: [f64; 3],
    frozen: bool,
}

impl StageMatrices {
    fn new(d: usize) -> Self {
        Self {
            start: Matrix::zeros(d),
            mid: Matrix::zeros(d),
            end: Matrix::zeros(d),
            shift: [0.0; 3],
            frozen: false,
        }
    }

    fn load(&mut self, path: &mut EnvironmentPath<'_>, t0: f64, h: f64) {
        path.matrix_at_time(t0, &mut self.start);
        self.shift[0] = center(&mut self.start);
        self.frozen = path.frozen_per_step();
        if self.frozen {
            self.shift[1] = self.shift[0];
            self.shift[2] = self.shift[0];
        } else {
            path.matrix_at_time(t0 + 0.5 * h, &mut self.mid);
            path.matrix_at_time(t0 + h, &mut self.end);
            self.shift[1] = center(&mut self.mid);
            self.shift[2] = center(&mut self.end);
        }
    }

    /// Simpson's rule for the removed scalar part over a step of length `h`.
    #[inline]
    fn shift_integral(&self, h: f64) -> f64 {
        h / 6.0 * (self.shift[0] + 4.0 * self.shift[1] + self.shift[2])
    }

    #[inline]
    fn mid(&self) -> &Matrix {
        if self.frozen {
            &self.start
        } else {
            &self.mid
        }
    }

    #[inline]
    fn end(&self) -> &Matrix {
        if self.frozen {
            &self.start
        } else {
            &self.end
        }
    }
}

/// Subtracts the mean diagonal from `m` and returns it.
fn center(m: &mut Matrix) -> f64 {
    let d = m.dim();
    let sigma = (0..d).map(|i| m[(i, i)]).sum::<f64>() / d as f64;
    for i in 0..d {
        m[(i, i)] -= sigma;
    }
    sigma
}

pub(crate) trait Stepper {
    fn advance(&mut self, a: &StageMatrices, h: f64) -> Result<()>;
}

/// Drives `stepper` over `[0, horizon]` on the grid `k·step`, splitting
/// steps at environment breakpoints and capping them at the environment's
/// maximum step. `on_sample` runs at `t = 0` and at every `thin`-th grid
/// point; `probe` sees the endpoints of every RK4 step.
pub(crate) fn march<S: Stepper>(
    path: &mut EnvironmentPath<'_>,
    opts: &IntegrationOptions,
    stepper: &mut S,
    on_sample: &mut dyn FnMut(f64, &S) -> Result<()>,
    mut probe: Option<&mut dyn FnMut(f64, f64)>,
) -> Result<()> {
    opts.validate()?;
    let d = path.spec().dim();
    let mut stages = StageMatrices::new(d);
    let n = (opts.horizon / opts.step - 1e-9).ceil().max(1.0) as usize;
    let max_h = path.max_step();
    let mut t = 0.0;
    on_sample(t, stepper)?;
    for k in 1..=n {
        let target = if k == n {
            opts.horizon
        } else {
            k as f64 * opts.step
        };
        while t < target {
            let mut end = target.min(path.next_breakpoint(t));
            if end - t > max_h {
                let pieces = ((end - t) / max_h).ceil();
                end = t + (end - t) / pieces;
            }
            let h = end - t;
            stages.load(path, t, h);
            stepper.advance(&stages, h)?;
            if let Some(p) = probe.as_mut() {
                p(t, end);
            }
            t = end;
        }
        if k % opts.thin == 0 || k == n {
            on_sample(t, stepper)?;
        }
    }
    Ok(())
}

/// RK4 state for `(θ, log ρ)`.
pub(crate) struct ThetaStepper {
    theta: Vec<f64>,
    log_rho: f64,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl ThetaStepper {
    pub(crate) fn new(theta0: &SimplexPoint) -> Self {
        let d = theta0.dim();
        Self {
            theta: theta0.coords().to_vec(),
            log_rho: 0.0,
            k: std::array::from_fn(|_| vec![0.0; d]),
            tmp: vec![0.0; d],
        }
    }

    pub(crate) fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn log_rho(&self) -> f64 {
        self.log_rho
    }
}

impl Stepper for ThetaStepper {
    fn advance(&mut self, a: &StageMatrices, h: f64) -> Result<()> {
        let [k1, k2, k3, k4] = &mut self.k;
        let g1 = field_into(&a.start, &self.theta, k1);
        for ((x, t), k) in self.tmp.iter_mut().zip(&self.theta).zip(k1.iter()) {
            *x = t + 0.5 * h * k;
        }
        let g2 = field_into(a.mid(), &self.tmp, k2);
        for ((x, t), k) in self.tmp.iter_mut().zip(&self.theta).zip(k2.iter()) {
            *x = t + 0.5 * h * k;
        }
        let g3 = field_into(a.mid(), &self.tmp, k3);
        for ((x, t), k) in self.tmp.iter_mut().zip(&self.theta).zip(k3.iter()) {
            *x = t + h * k;
        }
        let g4 = field_into(a.end(), &self.tmp, k4);
        for (i, t) in self.theta.iter_mut().enumerate() {
            *t += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        self.log_rho += h / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4) + a.shift_integral(h);
        renormalize(&mut self.theta)
    }
}

/// Steppers that carry a direction on the simplex and an accumulated
/// log-growth.
pub(crate) trait GrowthStepper: Stepper {
    fn direction(&self) -> &[f64];
    fn log_growth(&self) -> f64;
}

impl GrowthStepper for ThetaStepper {
    fn direction(&self) -> &[f64] {
        &self.theta
    }

    fn log_growth(&self) -> f64 {
        self.log_rho
    }
}

/// RK4 on the linear equation `dy/dt = A y`, renormalized to unit ℓ¹ norm
/// after every step with the discarded scale added to `log_norm`.
pub(crate) struct VectorStepper {
    y: Vec<f64>,
    log_norm: f64,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl VectorStepper {
    pub(crate) fn new(y0: &SimplexPoint) -> Self {
        let d = y0.dim();
        Self {
            y: y0.coords().to_vec(),
            log_norm: 0.0,
            k: std::array::from_fn(|_| vec![0.0; d]),
            tmp: vec![0.0; d],
        }
    }
}

impl Stepper for VectorStepper {
    fn advance(&mut self, a: &StageMatrices, h: f64) -> Result<()> {
        let [k1, k2, k3, k4] = &mut self.k;
        a.start.mul_vec_into(&self.y, k1);
        for ((x, y), k) in self.tmp.iter_mut().zip(&self.y).zip(k1.iter()) {
            *x = y + 0.5 * h * k;
        }
        a.mid().mul_vec_into(&self.tmp, k2);
        for ((x, y), k) in self.tmp.iter_mut().zip(&self.y).zip(k2.iter()) {
            *x = y + 0.5 * h * k;
        }
        a.mid().mul_vec_into(&self.tmp, k3);
        for ((x, y), k) in self.tmp.iter_mut().zip(&self.y).zip(k3.iter()) {
            *x = y + h * k;
        }
        a.end().mul_vec_into(&self.tmp, k4);
        for (i, y) in self.y.iter_mut().enumerate() {
            *y += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let before: f64 = self.y.iter().sum();
        renormalize(&mut self.y)?;
        self.log_norm += before.ln() + a.shift_integral(h);
        Ok(())
    }
}

impl GrowthStepper for VectorStepper {
    fn direction(&self) -> &[f64] {
        &self.y
    }

    fn log_growth(&self) -> f64 {
        self.log_norm
    }
}

/// Clips small negative components and rescales onto the simplex.
fn renormalize(theta: &mut [f64]) -> Result<()> {
    for c in theta.iter_mut() {
        if *c < 0.0 {
            if *c > -THETA_CLIP {
                *c = 0.0;
            } else {
                return Err(CoreError::NumericalBlowup(format!(
                    "θ component {c:e} below clipping threshold; reduce the step"
                )));
            }
        }
    }
    let sum: f64 = theta.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(CoreError::NumericalBlowup(format!(
            "θ sums to {sum} before renormalization"
        )));
    }
    theta.iter_mut().for_each(|c| *c /= sum);
    Ok(())
}

/// Streams the trajectory from `theta0` through `observer`.
pub fn run_trajectory(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    opts: &IntegrationOptions,
    mut observer: impl FnMut(&Sample<'_>) -> Result<()>,
) -> Result<()> {
    check_dim(spec, theta0)?;
    let mut path = EnvironmentPath::new(spec, seed);
    let mut stepper = ThetaStepper::new(theta0);
    march(
        &mut path,
        opts,
        &mut stepper,
        &mut |t, s: &ThetaStepper| {
            observer(&Sample {
                t,
                theta: s.theta(),
                log_rho: s.log_rho(),
            })
        },
        None,
    )
}

fn check_dim(spec: &EnvironmentSpec, theta0: &SimplexPoint) -> Result<()> {
    if theta0.dim() != spec.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.dim(),
            found: theta0.dim(),
        });
    }
    Ok(())
}

/// Integrates `(θ, log ρ)` and records every grid point.
pub fn integrate(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    horizon: f64,
    step: f64,
) -> Result<TrajectoryRecord> {
    integrate_with(spec, seed, theta0, &IntegrationOptions::new(horizon, step))
}

pub fn integrate_with(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    opts: &IntegrationOptions,
) -> Result<TrajectoryRecord> {
    record_trajectory(spec, seed, theta0, opts, None)
}

/// As [`integrate_with`], reporting the endpoints of every RK4 step to
/// `probe`.
pub fn integrate_with_probe(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    opts: &IntegrationOptions,
    probe: &mut dyn FnMut(f64, f64),
) -> Result<TrajectoryRecord> {
    record_trajectory(spec, seed, theta0, opts, Some(probe))
}

fn record_trajectory(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    opts: &IntegrationOptions,
    probe: Option<&mut dyn FnMut(f64, f64)>,
) -> Result<TrajectoryRecord> {
    check_dim(spec, theta0)?;
    let mut path = EnvironmentPath::new(spec, seed);
    let mut a0 = Matrix::zeros(spec.dim());
    path.matrix_at_time(0.0, &mut a0);
    let g0: f64 = a0.mul_vec(theta0.coords()).iter().sum();

    let mut record = TrajectoryRecord {
        sample_times: Vec::new(),
        theta_samples: Vec::new(),
        log_rho: Vec::new(),
        growth_integrand_avg: Vec::new(),
    };
    let mut stepper = ThetaStepper::new(theta0);
    march(
        &mut path,
        opts,
        &mut stepper,
        &mut |t, s: &ThetaStepper| {
            record.sample_times.push(t);
            record.theta_samples.push(SimplexPoint::new(s.theta().to_vec())?);
            record.log_rho.push(s.log_rho());
            record
                .growth_integrand_avg
                .push(if t > 0.0 { s.log_rho() / t } else { g0 });
            Ok(())
        },
        probe,
    )?;
    Ok(record)
}

/// Fundamental matrix `Φ(t, ω)` stored as a column-normalized matrix and
/// per-column log-scales: `Φ = matrix · diag(exp(log_scales))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    pub t: f64,
    /// Nonnegative, each column summing to one.
    pub matrix: Matrix,
    pub log_scales: Vec<f64>,
}

impl FundamentalMatrix {
    fn identity(d: usize) -> Self {
        Self {
            t: 0.0,
            matrix: Matrix::identity(d),
            log_scales: vec![0.0; d],
        }
    }

    /// `log Φ_ij`, `-∞` for a zero entry.
    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)].ln() + self.log_scales[j]
    }

    /// `Φ` itself; may overflow for long horizons.
    pub fn to_dense(&self) -> Matrix {
        let d = self.matrix.dim();
        Matrix::from_fn(d, |i, j| self.matrix[(i, j)] * self.log_scales[j].exp())
    }

    /// Column `j` projected on the simplex, i.e. `Ψ(t, ω) e_j`.
    pub fn column_direction(&self, j: usize) -> SimplexPoint {
        let d = self.matrix.dim();
        SimplexPoint::normalize((0..d).map(|i| self.matrix[(i, j)]).collect())
            .expect("columns are normalized and nonnegative")
    }

    pub fn is_positive(&self) -> bool {
        self.matrix.as_slice().iter().all(|v| *v > 0.0)
    }
}

pub(crate) struct MatrixStepper {
    state: FundamentalMatrix,
    k: [Matrix; 4],
    tmp: Matrix,
}

impl MatrixStepper {
    fn new(d: usize) -> Self {
        Self {
            state: FundamentalMatrix::identity(d),
            k: std::array::from_fn(|_| Matrix::zeros(d)),
            tmp: Matrix::zeros(d),
        }
    }
}

impl Stepper for MatrixStepper {
    fn advance(&mut self, a: &StageMatrices, h: f64) -> Result<()> {
        let m = &mut self.state.matrix;
        let [k1, k2, k3, k4] = &mut self.k;
        matmul_into(&a.start, m, k1);
        for ((x, v), k) in self.tmp.as_mut_slice().iter_mut().zip(m.as_slice()).zip(k1.as_slice()) {
            *x = v + 0.5 * h * k;
        }
        matmul_into(a.mid(), &self.tmp, k2);
        for ((x, v), k) in self.tmp.as_mut_slice().iter_mut().zip(m.as_slice()).zip(k2.as_slice()) {
            *x = v + 0.5 * h * k;
        }
        matmul_into(a.mid(), &self.tmp, k3);
        for ((x, v), k) in self.tmp.as_mut_slice().iter_mut().zip(m.as_slice()).zip(k3.as_slice()) {
            *x = v + h * k;
        }
        matmul_into(a.end(), &self.tmp, k4);
        let d = m.dim();
        for idx in 0..d * d {
            let inc = k1.as_slice()[idx]
                + 2.0 * k2.as_slice()[idx]
                + 2.0 * k3.as_slice()[idx]
                + k4.as_slice()[idx];
            let v = &mut m.as_mut_slice()[idx];
            *v += h / 6.0 * inc;
            if *v < 0.0 {
                if *v > -MATRIX_CLIP {
                    *v = 0.0;
                } else {
                    return Err(CoreError::NumericalBlowup(format!(
                        "fundamental matrix entry {v:e} below clipping threshold; reduce the step"
                    )));
                }
            }
        }
        let shift = a.shift_integral(h);
        for j in 0..d {
            let s: f64 = (0..d).map(|i| m[(i, j)]).sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(CoreError::NumericalBlowup(format!(
                    "fundamental matrix column {j} sums to {s}"
                )));
            }
            for i in 0..d {
                m[(i, j)] /= s;
            }
            self.state.log_scales[j] += s.ln() + shift;
        }
        self.state.t += h;
        Ok(())
    }
}

/// `Φ(horizon, ω)` for the path determined by `seed`. A zero horizon gives
/// the identity.
pub fn fundamental_matrix(
    spec: &EnvironmentSpec,
    seed: u64,
    horizon: f64,
    step: f64,
) -> Result<FundamentalMatrix> {
    if horizon == 0.0 {
        return Ok(FundamentalMatrix::identity(spec.dim()));
    }
    let opts = IntegrationOptions::new(horizon, step);
    let mut last = None;
    fundamental_matrix_samples(spec, seed, &opts, |fm| {
        last = Some(fm.clone());
        Ok(())
    })?;
    let mut fm = last.expect("final time is always sampled");
    fm.t = horizon;
    Ok(fm)
}

/// Streams `Φ(t, ω)` at the sample times of `opts`.
pub fn fundamental_matrix_samples(
    spec: &EnvironmentSpec,
    seed: u64,
    opts: &IntegrationOptions,
    mut observer: impl FnMut(&FundamentalMatrix) -> Result<()>,
) -> Result<()> {
    let mut path = EnvironmentPath::new(spec, seed);
    let mut stepper = MatrixStepper::new(spec.dim());
    march(
        &mut path,
        opts,
        &mut stepper,
        &mut |t, s: &MatrixStepper| {
            let mut fm = s.state.clone();
            fm.t = t;
            observer(&fm)
        },
        None,
    )
}

/// Hilbert distance between two trajectories driven by the same
/// environment path, at every grid time.
pub fn synchronized_pair_distance(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    theta0_other: &SimplexPoint,
    horizon: f64,
    step: f64,
) -> Result<Vec<(f64, f64)>> {
    if theta0.dim() != theta0_other.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: theta0.dim(),
            found: theta0_other.dim(),
        });
    }
    if !theta0.is_interior() || !theta0_other.is_interior() {
        return Err(CoreError::Domain(
            "initial conditions must be interior points of the simplex; perturb boundary starts by 1e-9"
                .into(),
        ));
    }
    if theta0 == theta0_other {
        return Err(CoreError::Domain("initial conditions must differ".into()));
    }
    let a = integrate(spec, seed, theta0, horizon, step)?;
    let b = integrate(spec, seed, theta0_other, horizon, step)?;
    a.sample_times
        .iter()
        .zip(a.theta_samples.iter().zip(&b.theta_samples))
        .map(|(t, (x, y))| Ok((*t, hilbert_distance(x.coords(), y.coords())?)))
        .collect()
}
