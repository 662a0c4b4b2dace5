//! Time-rescaling sweeps of the top exponent, the fast (`T → 0`) and slow
//! (`T → ∞`) limit predictions, and occupation concentration statistics.

use std::collections::HashMap;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::dynamics::fmt_f64;
use crate::environment::{average_matrix, measure_average, EnvState, EnvironmentPath, EnvironmentSpec};
use crate::error::{CoreError, Result};
use crate::linalg::{dominant_direction, is_irreducible, perron_eigenpair, spectral_abscissa};
use crate::linalg::{Matrix, PerronPair, SimplexPoint};
use crate::lyapunov::{default_burn_in, estimate_observed, LambdaEstimate, Method};
use crate::seed::derive_seed;

/// Timescales up to this value use the fast reference direction.
pub const MODE_THRESHOLD: f64 = 1.0;

/// Slow sweeps run for at least this many environment time units.
pub const MIN_TRANSITIONS: f64 = 100.0;

pub const DEFAULT_POINTS_PER_DECADE: usize = 5;

/// `(λ_max(Ā), θ*(Ā))`; `Ā` must be irreducible.
pub fn predict_fast_limit(spec: &EnvironmentSpec) -> Result<PerronPair> {
    let avg = average_matrix(spec)?;
    if !is_irreducible(avg.as_matrix()) {
        return Err(CoreError::AssumptionViolation(
            "the averaged matrix is reducible".into(),
        ));
    }
    perron_eigenpair(avg.as_matrix())
}

/// `∫ λ_max(A(s)) μ(ds)`, requiring every sampled `A(s)` to be irreducible.
pub fn predict_slow_limit(spec: &EnvironmentSpec) -> Result<f64> {
    let avg = measure_average(spec, |a, state| {
        if !is_irreducible(a) {
            return Err(CoreError::AssumptionViolation(format!(
                "A(s) is reducible at {}",
                describe(state)
            )));
        }
        Ok(vec![perron_eigenpair(a)?.lambda_max])
    })?;
    Ok(avg.values[0])
}

fn describe(state: &EnvState) -> String {
    match state {
        EnvState::Discrete(_) => state.to_string(),
        _ => format!("s={state}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlowLimit {
    pub value: f64,
    /// First sampled environment state where `A(s)` is reducible.
    pub reducible_at: Option<String>,
}

/// `∫ s(A(s)) μ(ds)` with `s` the spectral abscissa. Agrees with
/// [`predict_slow_limit`] whenever the latter is defined and stays finite
/// for reducible `A(s)`.
pub fn slow_limit_spectral_abscissa(spec: &EnvironmentSpec) -> Result<SlowLimit> {
    let mut reducible_at = None;
    let avg = measure_average(spec, |a, state| {
        if reducible_at.is_none() && !is_irreducible(a) {
            reducible_at = Some(describe(state));
        }
        Ok(vec![spectral_abscissa(a)?])
    })?;
    Ok(SlowLimit {
        value: avg.values[0],
        reducible_at,
    })
}

/// `s(Ā)`, defined even when `Ā` is reducible.
pub fn fast_limit_spectral_abscissa(spec: &EnvironmentSpec) -> Result<f64> {
    spectral_abscissa(average_matrix(spec)?.as_matrix())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcentrationMode {
    /// Distance to the Perron direction of the averaged matrix.
    Fast,
    /// Distance to the dominant direction of the current `A(ω_u)`.
    Slow,
}

impl ConcentrationMode {
    pub fn for_timescale(t: f64) -> Self {
        if t <= MODE_THRESHOLD {
            ConcentrationMode::Fast
        } else {
            ConcentrationMode::Slow
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concentration {
    /// Time average of `‖θ_u − θ_ref(ω_u)‖₁` over `[burn_in, horizon]`.
    pub distance: f64,
    pub half_split_gap: f64,
    pub mode: ConcentrationMode,
}

/// Accumulates the trapezoid average of the reference distance along a
/// trajectory.
struct ConcentrationTracker<'a> {
    path: EnvironmentPath<'a>,
    mode: ConcentrationMode,
    fast_ref: Option<SimplexPoint>,
    cache: HashMap<usize, SimplexPoint>,
    scratch: Matrix,
    burn_in: f64,
    mid: f64,
    last: Option<(f64, f64)>,
    halves: [f64; 2],
    spans: [f64; 2],
}

impl<'a> ConcentrationTracker<'a> {
    fn new(
        spec: &'a EnvironmentSpec,
        seed: u64,
        mode: ConcentrationMode,
        burn_in: f64,
        horizon: f64,
    ) -> Result<Self> {
        let fast_ref = match mode {
            ConcentrationMode::Fast => Some(dominant_direction(average_matrix(spec)?.as_matrix())?),
            ConcentrationMode::Slow => None,
        };
        Ok(Self {
            path: EnvironmentPath::new(spec, seed),
            mode,
            fast_ref,
            cache: HashMap::new(),
            scratch: Matrix::zeros(spec.dim()),
            burn_in,
            mid: 0.5 * (burn_in + horizon),
            last: None,
            halves: [0.0; 2],
            spans: [0.0; 2],
        })
    }

    fn observe(&mut self, t: f64, theta: &[f64]) -> Result<()> {
        if t < self.burn_in {
            return Ok(());
        }
        let dist = {
            let r = self.reference(t)?;
            r.coords().iter().zip(theta).map(|(a, b)| (a - b).abs()).sum::<f64>()
        };
        if let Some((t0, d0)) = self.last {
            let half = usize::from(0.5 * (t0 + t) >= self.mid);
            self.halves[half] += 0.5 * (t - t0) * (d0 + dist);
            self.spans[half] += t - t0;
        }
        self.last = Some((t, dist));
        Ok(())
    }

    fn reference(&mut self, t: f64) -> Result<SimplexPoint> {
        if let Some(r) = &self.fast_ref {
            return Ok(r.clone());
        }
        let state = self.path.state_at(t);
        self.path.matrix_at_time(t, &mut self.scratch);
        match state {
            EnvState::Discrete(i) => {
                if let Some(r) = self.cache.get(&i) {
                    return Ok(r.clone());
                }
                let r = dominant_direction(&self.scratch)?;
                self.cache.insert(i, r.clone());
                Ok(r)
            }
            _ => dominant_direction(&self.scratch),
        }
    }

    fn finish(self) -> Concentration {
        let span = self.spans[0] + self.spans[1];
        let distance = if span > 0.0 {
            (self.halves[0] + self.halves[1]) / span
        } else {
            0.0
        };
        let avg = |k: usize| {
            if self.spans[k] > 0.0 {
                self.halves[k] / self.spans[k]
            } else {
                distance
            }
        };
        Concentration {
            distance,
            half_split_gap: (avg(0) - avg(1)).abs(),
            mode: self.mode,
        }
    }
}

/// Time-averaged `ℓ¹` distance between `θ_u` and the reference direction
/// for the environment run at timescale `t`. `mode = None` picks the fast
/// reference for `t ≤ 1`.
#[allow(clippy::too_many_arguments)]
pub fn occupation_concentration(
    spec: &EnvironmentSpec,
    t: f64,
    seed: u64,
    horizon: f64,
    step: f64,
    burn_in: Option<f64>,
    mode: Option<ConcentrationMode>,
) -> Result<Concentration> {
    let scaled = spec.with_timescale(t)?;
    let (_, conc) = estimate_with_concentration(&scaled, seed, horizon, step, burn_in, mode)?;
    Ok(conc)
}

fn estimate_with_concentration(
    spec: &EnvironmentSpec,
    seed: u64,
    horizon: f64,
    step: f64,
    burn_in: Option<f64>,
    mode: Option<ConcentrationMode>,
) -> Result<(LambdaEstimate, Concentration)> {
    let burn_in = burn_in.unwrap_or_else(|| default_burn_in(horizon));
    let mode = mode.unwrap_or_else(|| ConcentrationMode::for_timescale(spec.timescale()));
    let mut tracker = ConcentrationTracker::new(spec, seed, mode, burn_in, horizon)?;
    let theta0 = SimplexPoint::barycenter(spec.dim());
    let est = estimate_observed(
        spec,
        seed,
        &theta0,
        Method::ErgodicAverage,
        horizon,
        step,
        Some(burn_in),
        &mut |t, theta| tracker.observe(t, theta),
    )?;
    Ok((est, tracker.finish()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSweepResult {
    pub t_values: Vec<f64>,
    pub lambda_hats: Vec<LambdaEstimate>,
    pub fast_limit: f64,
    pub slow_limit: f64,
    pub concentration: Vec<f64>,
}

impl RegimeSweepResult {
    pub const CSV_HEADER: &'static str =
        "T,lambda_hat,half_split_gap,fast_limit,slow_limit,concentration,seed,horizon,step";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for ((t, est), c) in self.t_values.iter().zip(&self.lambda_hats).zip(&self.concentration) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                fmt_f64(*t),
                fmt_f64(est.value),
                fmt_f64(est.half_split_gap),
                fmt_f64(self.fast_limit),
                fmt_f64(self.slow_limit),
                fmt_f64(*c),
                est.seed.unwrap_or_default(),
                fmt_f64(est.horizon),
                fmt_f64(est.step),
            )?;
        }
        Ok(())
    }
}

/// Runs the ergodic estimator at each timescale in parallel. Point `i`
/// uses seed `derive_seed(seed, i)` and horizon
/// `max(horizon_per_t, 100·T)`, so results do not depend on the thread
/// count.
pub fn sweep_lambda(
    spec: &EnvironmentSpec,
    t_values: &[f64],
    seed: u64,
    horizon_per_t: f64,
    step: f64,
) -> Result<RegimeSweepResult> {
    if t_values.is_empty() {
        return Err(CoreError::Parameter("T_values must not be empty".into()));
    }
    if let Some(t) = t_values.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(CoreError::Parameter(format!("T_values must be positive, got {t}")));
    }
    if t_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::Parameter("T_values must be strictly increasing".into()));
    }
    let fast_limit = fast_limit_spectral_abscissa(spec)?;
    let slow = slow_limit_spectral_abscissa(spec)?;
    if let Some(at) = &slow.reducible_at {
        log::warn!("A(s) is reducible at {at}; the slow limit uses the spectral abscissa");
    }
    let points: Vec<(LambdaEstimate, Concentration)> = t_values
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let scaled = spec.with_timescale(t)?;
            let horizon = horizon_per_t.max(MIN_TRANSITIONS * t);
            estimate_with_concentration(&scaled, derive_seed(seed, i as u64), horizon, step, None, None)
        })
        .collect::<Result<_>>()?;
    let (lambda_hats, conc): (Vec<_>, Vec<_>) = points.into_iter().unzip();
    Ok(RegimeSweepResult {
        t_values: t_values.to_vec(),
        lambda_hats,
        fast_limit,
        slow_limit: slow.value,
        concentration: conc.into_iter().map(|c| c.distance).collect(),
    })
}

/// Geometric grid from `t_min` to `t_max` (both included) with about
/// `points_per_decade` points per factor of ten.
pub fn log_spaced_grid(t_min: f64, t_max: f64, points_per_decade: usize) -> Result<Vec<f64>> {
    if !(t_min > 0.0) || !t_min.is_finite() || !(t_max > t_min) || !t_max.is_finite() {
        return Err(CoreError::Parameter(format!(
            "need 0 < T_min < T_max, got T_min = {t_min}, T_max = {t_max}"
        )));
    }
    if points_per_decade == 0 {
        return Err(CoreError::Parameter("points_per_decade must be at least 1".into()));
    }
    let decades = (t_max / t_min).log10();
    let n = ((decades * points_per_decade as f64) - 1e-9).ceil().max(1.0) as usize;
    let (lo, hi) = (t_min.ln(), t_max.ln());
    Ok((0..=n)
        .map(|k| match k {
            0 => t_min,
            k if k == n => t_max,
            k => (lo + (hi - lo) * k as f64 / n as f64).exp(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::FourierMap;
    use crate::linalg::MetzlerMatrix;

    pub(crate) fn destabilization_pair() -> EnvironmentSpec {
        let rates = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let tab = vec![
            MetzlerMatrix::from_rows(&[[-1.0, 0.0], [10.0, -1.0]]).unwrap(),
            MetzlerMatrix::from_rows(&[[-1.0, 10.0], [0.0, -1.0]]).unwrap(),
        ];
        EnvironmentSpec::markov_switch(rates, 0, tab).unwrap()
    }

    fn constant(rows: &[&[f64]]) -> EnvironmentSpec {
        EnvironmentSpec::constant(MetzlerMatrix::from_rows(rows).unwrap())
    }

    #[test]
    fn fast_limit_examples() {
        let p = predict_fast_limit(&destabilization_pair()).unwrap();
        assert!((p.lambda_max - 4.0).abs() < 1e-10);
        assert!(p.vector.max_distance(&SimplexPoint::barycenter(2)) < 1e-10);

        let c = predict_fast_limit(&constant(&[&[1.0, 2.0], &[3.0, 0.0]])).unwrap();
        assert!((c.lambda_max - 3.0).abs() < 1e-10);

        let reducible = constant(&[&[-1.0, 0.0], &[1.0, -1.0]]);
        assert!(predict_fast_limit(&reducible).unwrap_err().is_assumption_violation());
    }

    #[test]
    fn slow_limit_examples() {
        let pair = destabilization_pair();
        let err = predict_slow_limit(&pair).unwrap_err();
        assert!(err.is_assumption_violation());
        assert!(err.to_string().contains("state 1"), "{err}");
        let lenient = slow_limit_spectral_abscissa(&pair).unwrap();
        assert!((lenient.value + 1.0).abs() < 1e-12);
        assert_eq!(lenient.reducible_at.as_deref(), Some("state 1"));

        let c = predict_slow_limit(&constant(&[&[1.0, 2.0], &[3.0, 0.0]])).unwrap();
        assert!((c - 3.0).abs() < 1e-10);

        // A(s) = A0 + (0.5 + cos 2πs)·I
        let a0 = Matrix::from_rows(&[[-1.0, 2.0], [1.0, -3.0]]).unwrap();
        let map = FourierMap::constant(a0.add_identity(0.5))
            .with_harmonic(0, 1, Some(Matrix::identity(2)), None)
            .unwrap();
        let spec = EnvironmentSpec::periodic(0.0, map).unwrap();
        let exact = perron_eigenpair(&a0).unwrap().lambda_max + 0.5;
        assert!((predict_slow_limit(&spec).unwrap() - exact).abs() < 1e-10);
    }

    #[test]
    fn scalar_limits_coincide() {
        let rates = Matrix::from_rows(&[[0.0, 1.0], [2.0, 0.0]]).unwrap();
        let tab = vec![
            MetzlerMatrix::from_rows(&[[-1.0]]).unwrap(),
            MetzlerMatrix::from_rows(&[[1.0]]).unwrap(),
        ];
        let spec = EnvironmentSpec::markov_switch(rates, 0, tab).unwrap();
        let fast = predict_fast_limit(&spec).unwrap().lambda_max;
        let slow = predict_slow_limit(&spec).unwrap();
        assert!((fast + 1.0 / 3.0).abs() < 1e-12);
        assert!((slow + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_concentration_vanishes() {
        let spec = constant(&[&[1.0, 2.0], &[3.0, 0.0]]);
        for t in [0.1, 10.0] {
            let c = occupation_concentration(&spec, t, 0, 50.0, 1e-2, Some(20.0), None).unwrap();
            assert!(c.distance < 1e-9, "{c:?}");
        }
    }

    #[test]
    fn constant_sweep_is_flat() {
        let spec = constant(&[&[1.0, 2.0], &[3.0, 0.0]]);
        let res = sweep_lambda(&spec, &[0.1, 1.0, 10.0], 7, 50.0, 1e-2).unwrap();
        assert_eq!(res.lambda_hats.len(), 3);
        assert_eq!(res.lambda_hats[2].horizon, 1000.0);
        for est in &res.lambda_hats {
            assert!((est.value - 3.0).abs() < 1e-6);
        }
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(RegimeSweepResult::CSV_HEADER));
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let spec = constant(&[&[1.0]]);
        assert!(sweep_lambda(&spec, &[], 0, 10.0, 0.1).is_err());
        assert!(sweep_lambda(&spec, &[1.0, 1.0], 0, 10.0, 0.1).is_err());
        assert!(sweep_lambda(&spec, &[-1.0], 0, 10.0, 0.1).is_err());
    }

    #[test]
    fn grid_has_exact_endpoints() {
        let g = log_spaced_grid(1e-3, 1e3, 5).unwrap();
        assert_eq!(g.len(), 31);
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[30], 1e3);
        assert!((g[5] - 1e-2).abs() < 1e-15);
        assert!(log_spaced_grid(1.0, 1.0, 5).is_err());
    }
}
