//! Top Lyapunov exponent estimators, column-sum and symmetric-part bounds,
//! and contraction diagnostics for the fundamental matrix.

use std::fmt;

use crate::dynamics::{
    fundamental_matrix, fundamental_matrix_samples, march, GrowthStepper, IntegrationOptions,
    ThetaStepper, VectorStepper,
};
use crate::environment::{measure_average, EnvironmentKind, EnvironmentPath, EnvironmentSpec};
use crate::error::{CoreError, Result};
use crate::linalg::{birkhoff_tau, hilbert_distance, perron_eigenpair, symmetric_part_extremes};
use crate::linalg::{Matrix, SimplexPoint};

/// Period-map iteration stops once successive iterates differ by less than
/// this in the max norm.
pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const FIXED_POINT_MAX_ITER: usize = 10_000;

/// Fraction of the horizon discarded when no burn-in is given.
pub const DEFAULT_BURN_IN_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Time average of `⟨A(ω_u)θ_u, 1⟩` along the projective flow.
    ErgodicAverage,
    /// Growth of `log ‖y_t‖₁` for the linear equation integrated directly.
    LogNormGrowth,
    PeriodicFixedPoint,
    FloquetMonodromy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ErgodicAverage => "ergodic_average",
            Method::LogNormGrowth => "log_norm_growth",
            Method::PeriodicFixedPoint => "periodic_fixed_point",
            Method::FloquetMonodromy => "floquet_monodromy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            Method::ErgodicAverage,
            Method::LogNormGrowth,
            Method::PeriodicFixedPoint,
            Method::FloquetMonodromy,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }

    pub fn is_deterministic(self) -> bool {
        matches!(self, Method::PeriodicFixedPoint | Method::FloquetMonodromy)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaEstimate {
    pub value: f64,
    pub method: Method,
    pub horizon: f64,
    pub step: f64,
    pub burn_in: f64,
    /// `|first-half estimate − second-half estimate|` over `[burn_in, horizon]`.
    pub half_split_gap: f64,
    pub seed: Option<u64>,
    /// Largest `|Σθ − 1|` over the recorded samples.
    pub simplex_defect: f64,
}

pub fn default_burn_in(horizon: f64) -> f64 {
    DEFAULT_BURN_IN_FRACTION * horizon
}

/// Estimate of the top exponent from one trajectory started at the
/// barycenter. `burn_in = None` discards the first 10% of the horizon.
pub fn estimate_lambda(
    spec: &EnvironmentSpec,
    seed: u64,
    method: Method,
    horizon: f64,
    step: f64,
    burn_in: Option<f64>,
) -> Result<LambdaEstimate> {
    let theta0 = SimplexPoint::barycenter(spec.dim());
    estimate_lambda_from(spec, seed, &theta0, method, horizon, step, burn_in)
}

pub fn estimate_lambda_from(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    method: Method,
    horizon: f64,
    step: f64,
    burn_in: Option<f64>,
) -> Result<LambdaEstimate> {
    estimate_observed(spec, seed, theta0, method, horizon, step, burn_in, &mut |_, _| Ok(()))
}

/// As [`estimate_lambda_from`], also handing every sample `(t, θ_t)` to
/// `observer`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn estimate_observed(
    spec: &EnvironmentSpec,
    seed: u64,
    theta0: &SimplexPoint,
    method: Method,
    horizon: f64,
    step: f64,
    burn_in: Option<f64>,
    observer: &mut dyn FnMut(f64, &[f64]) -> Result<()>,
) -> Result<LambdaEstimate> {
    if theta0.dim() != spec.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.dim(),
            found: theta0.dim(),
        });
    }
    let burn_in = burn_in.unwrap_or_else(|| default_burn_in(horizon));
    if !(burn_in >= 0.0) || !(burn_in < horizon) {
        return Err(CoreError::Parameter(format!(
            "burn_in must lie in [0, horizon), got {burn_in} with horizon {horizon}"
        )));
    }
    let opts = IntegrationOptions::new(horizon, step);
    let mut path = EnvironmentPath::new(spec, seed);
    let checkpoints = [burn_in, 0.5 * (burn_in + horizon), horizon];
    let growth = match method {
        Method::ErgodicAverage => {
            let mut s = ThetaStepper::new(theta0);
            track_growth(&mut path, &opts, &mut s, checkpoints, observer)?
        }
        Method::LogNormGrowth => {
            let mut s = VectorStepper::new(theta0);
            track_growth(&mut path, &opts, &mut s, checkpoints, observer)?
        }
        Method::PeriodicFixedPoint | Method::FloquetMonodromy => {
            return Err(CoreError::Parameter(format!(
                "method {method} is not a trajectory estimator; use the periodic solvers"
            )))
        }
    };
    let [(t0, l0), (t1, l1), (t2, l2)] = growth.marks;
    let first = (l1 - l0) / (t1 - t0);
    let second = (l2 - l1) / (t2 - t1);
    Ok(LambdaEstimate {
        value: (l2 - l0) / (t2 - t0),
        method,
        horizon,
        step,
        burn_in,
        half_split_gap: (first - second).abs(),
        seed: Some(seed),
        simplex_defect: growth.defect,
    })
}

struct Growth {
    /// `(t, log growth)` at the first samples reaching each checkpoint.
    marks: [(f64, f64); 3],
    defect: f64,
}

fn track_growth<S: GrowthStepper>(
    path: &mut EnvironmentPath<'_>,
    opts: &IntegrationOptions,
    stepper: &mut S,
    checkpoints: [f64; 3],
    observer: &mut dyn FnMut(f64, &[f64]) -> Result<()>,
) -> Result<Growth> {
    let slack = 1e-9 * opts.step;
    let mut marks = [(f64::NAN, f64::NAN); 3];
    let mut next = 0;
    let mut defect = 0.0f64;
    march(
        path,
        opts,
        stepper,
        &mut |t, s: &S| {
            let dir = s.direction();
            defect = defect.max((dir.iter().sum::<f64>() - 1.0).abs());
            while next < 3 && t >= checkpoints[next] - slack {
                marks[next] = (t, s.log_growth());
                next += 1;
            }
            observer(t, dir)
        },
        None,
    )?;
    Ok(Growth { marks, defect })
}

fn require_periodic(spec: &EnvironmentSpec) -> Result<f64> {
    match spec.kind() {
        EnvironmentKind::Periodic { .. } => Ok(spec.timescale()),
        other => Err(CoreError::Parameter(format!(
            "periodic solvers need a periodic environment, got {}",
            other.name()
        ))),
    }
}

/// Step dividing the period `p` evenly, no larger than `step` and with at
/// least two steps per period.
fn period_step(p: f64, step: f64) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(CoreError::Parameter(format!(
            "step must be positive and finite, got {step}"
        )));
    }
    let n = ((p / step - 1e-9).ceil() as usize).max(2);
    Ok(p / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSolution {
    pub estimate: LambdaEstimate,
    /// Fixed point of the period map at the initial phase.
    pub theta_star: SimplexPoint,
    pub iterations: usize,
}

/// Exponent of a periodic environment from the fixed point of the period
/// map. The period is the timescale `T`.
pub fn lambda_periodic_exact(spec: &EnvironmentSpec, step: f64) -> Result<PeriodicSolution> {
    let p = require_periodic(spec)?;
    let h = period_step(p, step)?;
    let opts = IntegrationOptions::new(p, h);
    let mut theta = SimplexPoint::barycenter(spec.dim());
    let mut gap = f64::INFINITY;
    for it in 1..=FIXED_POINT_MAX_ITER {
        let mut path = EnvironmentPath::new(spec, 0);
        let mut s = ThetaStepper::new(&theta);
        march(&mut path, &opts, &mut s, &mut |_, _| Ok(()), None)?;
        let next = SimplexPoint::normalize(s.direction().to_vec())?;
        let change = next.max_distance(&theta);
        gap = hilbert_distance(next.coords(), theta.coords()).unwrap_or(f64::INFINITY);
        let log_rho = s.log_growth();
        theta = next;
        if change < FIXED_POINT_TOL {
            let defect = (theta.coords().iter().sum::<f64>() - 1.0).abs();
            return Ok(PeriodicSolution {
                estimate: LambdaEstimate {
                    value: log_rho / p,
                    method: Method::PeriodicFixedPoint,
                    horizon: p,
                    step: h,
                    burn_in: 0.0,
                    half_split_gap: 0.0,
                    seed: None,
                    simplex_defect: defect,
                },
                theta_star: theta,
                iterations: it,
            });
        }
    }
    Err(CoreError::ContractionFailure {
        iterations: FIXED_POINT_MAX_ITER,
        gap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloquetSolution {
    pub estimate: LambdaEstimate,
    /// Perron direction of the monodromy matrix.
    pub direction: SimplexPoint,
}

/// Exponent of a periodic environment from the Perron root of the
/// monodromy matrix, combined with the column log-scales so long periods
/// do not overflow.
pub fn lambda_floquet(spec: &EnvironmentSpec, step: f64) -> Result<FloquetSolution> {
    let p = require_periodic(spec)?;
    let h = period_step(p, step)?;
    let fm = fundamental_matrix(spec, 0, p, h)?;
    let d = spec.dim();
    let lmax = fm.log_scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = Matrix::from_fn(d, |i, j| {
        let v = fm.matrix[(i, j)] * (fm.log_scales[j] - lmax).exp();
        // keep the sparsity pattern when a column scale underflows
        if fm.matrix[(i, j)] > 0.0 {
            v.max(f64::MIN_POSITIVE)
        } else {
            0.0
        }
    });
    let c = w.max_abs();
    w = w.scaled(1.0 / c);
    let pair = perron_eigenpair(&w)?;
    Ok(FloquetSolution {
        estimate: LambdaEstimate {
            value: (lmax + c.ln() + pair.lambda_max.ln()) / p,
            method: Method::FloquetMonodromy,
            horizon: p,
            step: h,
            burn_in: 0.0,
            half_split_gap: 0.0,
            seed: None,
            simplex_defect: 0.0,
        },
        direction: pair.vector,
    })
}

/// Two intervals containing the top exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorollaryBounds {
    /// `(∫ min_i colsum_i A(s) dμ, ∫ max_i colsum_i A(s) dμ)`.
    pub column_sum: (f64, f64),
    /// `(∫ λ_min(sym A(s)) dμ, ∫ λ_max(sym A(s)) dμ)`.
    pub symmetric: (f64, f64),
    pub refinement_gap: f64,
}

impl CorollaryBounds {
    /// Whether `value` lies in both intervals up to `tol`.
    pub fn contains(&self, value: f64, tol: f64) -> bool {
        let inside = |(lo, hi): (f64, f64)| value >= lo - tol && value <= hi + tol;
        inside(self.column_sum) && inside(self.symmetric)
    }
}

pub fn corollary_bounds(spec: &EnvironmentSpec) -> Result<CorollaryBounds> {
    let avg = measure_average(spec, |a, _| {
        let sums = a.column_sums();
        let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (smin, smax) = symmetric_part_extremes(a);
        Ok(vec![lo, hi, smin, smax])
    })?;
    let v = avg.values;
    Ok(CorollaryBounds {
        column_sum: (v[0], v[1]),
        symmetric: (v[2], v[3]),
        refinement_gap: avg.refinement_gap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContractionDiagnostics {
    Positive {
        /// First sample time at which the fundamental matrix is entrywise
        /// positive.
        first_positive_time: f64,
        /// Least-squares slope of `log τ(Φ(t))` over samples with
        /// `1e-12 < τ < 1`; `None` with fewer than two such samples.
        empirical_rate: Option<f64>,
    },
    /// The fundamental matrix kept a zero entry up to the horizon.
    NoPositivity { horizon: f64 },
}

/// Below this the Birkhoff coefficient is dominated by rounding.
const TAU_FLOOR: f64 = 1e-12;

pub fn contraction_diagnostics(
    spec: &EnvironmentSpec,
    seed: u64,
    horizon: f64,
    step: f64,
) -> Result<ContractionDiagnostics> {
    let opts = IntegrationOptions::new(horizon, step);
    let mut first = None;
    let mut points: Vec<(f64, f64)> = Vec::new();
    fundamental_matrix_samples(spec, seed, &opts, |fm| {
        if fm.t > 0.0 && fm.is_positive() {
            first.get_or_insert(fm.t);
            let tau = birkhoff_tau(&fm.matrix)?;
            if tau > TAU_FLOOR && tau < 1.0 {
                points.push((fm.t, tau.ln()));
            }
        }
        Ok(())
    })?;
    Ok(match first {
        None => ContractionDiagnostics::NoPositivity { horizon },
        Some(t) => ContractionDiagnostics::Positive {
            first_positive_time: t,
            empirical_rate: ls_slope(&points),
        },
    })
}

fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
