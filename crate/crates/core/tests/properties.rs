use coopdyn_core::dynamics::{integrate, integrate_with_probe, IntegrationOptions};
use coopdyn_core::environment::{env_state_at, EnvState, EnvironmentPath, EnvironmentSpec, FourierMap};
use coopdyn_core::linalg::{
    birkhoff_tau, hilbert_distance, perron_eigenpair, symmetric_part_extremes, Matrix,
    MetzlerMatrix, SimplexPoint,
};
use coopdyn_core::lyapunov::{estimate_lambda, estimate_lambda_from, lambda_floquet, lambda_periodic_exact, Method};
use proptest::prelude::*;

/// Irreducible Metzler matrix: a random pattern plus the cycle 0→1→…→0.
fn irreducible(d: usize) -> impl Strategy<Value = Matrix> {
    (
        prop::collection::vec(-5.0..5.0f64, d),
        prop::collection::vec(prop_oneof![Just(0.0), 0.0..5.0f64], d * d),
        prop::collection::vec(0.1..5.0f64, d),
    )
        .prop_map(move |(diag, off, cycle)| {
            let mut m = Matrix::from_fn(d, |i, j| if i == j { diag[i] } else { off[i * d + j] });
            if d > 1 {
                for i in 0..d {
                    let j = (i + 1) % d;
                    m[(j, i)] = m[(j, i)].max(cycle[i]);
                }
            }
            m
        })
}

fn any_irreducible(max_d: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_d).prop_flat_map(irreducible)
}

fn positive_matrix(d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0.01..5.0f64, d * d)
        .prop_map(move |v| Matrix::from_fn(d, |i, j| v[i * d + j]))
}

fn interior(d: usize) -> impl Strategy<Value = SimplexPoint> {
    prop::collection::vec(0.01..1.0f64, d).prop_map(|v| SimplexPoint::normalize(v).unwrap())
}

fn switching(d: usize) -> impl Strategy<Value = EnvironmentSpec> {
    (irreducible(d), irreducible(d), 0.2..3.0f64, 0.2..3.0f64).prop_map(|(a, b, p, q)| {
        let rates = Matrix::from_rows(&[[0.0, p], [q, 0.0]]).unwrap();
        let tab = vec![MetzlerMatrix::new(a).unwrap(), MetzlerMatrix::new(b).unwrap()];
        EnvironmentSpec::markov_switch(rates, 0, tab).unwrap()
    })
}

/// Irreducible base plus a small first harmonic keeping off-diagonals
/// nonnegative.
fn periodic(d: usize) -> impl Strategy<Value = EnvironmentSpec> {
    (
        irreducible(d),
        prop::collection::vec(-0.5..0.5f64, d * d),
        prop::collection::vec(-0.5..0.5f64, d * d),
        0.0..1.0f64,
    )
        .prop_map(move |(base, c, s, phase)| {
            let amp = |v: &[f64], i: usize, j: usize| {
                let x = v[i * d + j];
                if i == j {
                    x
                } else {
                    x * base[(i, j)] * 0.9
                }
            };
            let cos = Matrix::from_fn(d, |i, j| amp(&c, i, j));
            let sin = Matrix::from_fn(d, |i, j| amp(&s, i, j));
            let map = FourierMap::constant(base.clone())
                .with_harmonic(0, 1, Some(cos), Some(sin))
                .unwrap();
            EnvironmentSpec::periodic(phase, map).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perron_pair_residual_and_positivity(m in (2..=6usize).prop_flat_map(irreducible)) {
        let p = perron_eigenpair(&m).unwrap();
        let mv = m.mul_vec(p.vector.coords());
        let res = mv
            .iter()
            .zip(p.vector.coords())
            .map(|(a, v)| (a - p.lambda_max * v).abs())
            .fold(0.0, f64::max);
        prop_assert!(res <= 1e-10 * (1.0 + m.norm_inf()));
        prop_assert!(p.vector.coords().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn perron_root_shift_equivariance(m in any_irreducible(5), c in -10.0..10.0f64) {
        let base = perron_eigenpair(&m).unwrap().lambda_max;
        let shifted = perron_eigenpair(&m.add_identity(c)).unwrap().lambda_max;
        prop_assert!((shifted - base - c).abs() <= 1e-10 * (1.0 + base.abs() + c.abs()));
    }

    #[test]
    fn constant_bounds_sandwich(m in any_irreducible(5)) {
        let lam = perron_eigenpair(&m).unwrap().lambda_max;
        let sums = m.column_sums();
        let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (smin, smax) = symmetric_part_extremes(&m);
        let tol = 1e-10 * (1.0 + m.norm_inf());
        prop_assert!(lo - tol <= lam && lam <= hi + tol);
        prop_assert!(smin - tol <= lam && lam <= smax + tol);
    }

    #[test]
    fn birkhoff_contraction(
        (m, x, y) in (2..=4usize).prop_flat_map(|d| (positive_matrix(d), interior(d), interior(d)))
    ) {
        prop_assume!(x != y);
        let tau = birkhoff_tau(&m).unwrap();
        let before = hilbert_distance(x.coords(), y.coords()).unwrap();
        let after = hilbert_distance(&m.mul_vec(x.coords()), &m.mul_vec(y.coords())).unwrap();
        prop_assert!(after <= tau * before + 1e-9);
    }

    #[test]
    fn sup_distance_below_hilbert(
        (x, y) in (2..=6usize).prop_flat_map(|d| (interior(d), interior(d)))
    ) {
        let dh = hilbert_distance(x.coords(), y.coords()).unwrap();
        prop_assert!(x.max_distance(&y) <= dh.exp_m1() + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trajectories_stay_in_open_simplex(spec in (2..=4usize).prop_flat_map(switching), seed in any::<u64>()) {
        let theta0 = SimplexPoint::barycenter(spec.dim());
        let rec = integrate(&spec, seed, &theta0, 20.0, 1e-3).unwrap();
        prop_assert!(rec.max_simplex_defect() <= 1e-12);
        for th in &rec.theta_samples {
            prop_assert!(th.coords().iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn steps_never_straddle_jumps(spec in (2..=3usize).prop_flat_map(switching), seed in any::<u64>()) {
        let horizon = 30.0;
        let jumps = EnvironmentPath::new(&spec, seed).markov().unwrap().jump_times(horizon);
        let mut steps = Vec::new();
        let theta0 = SimplexPoint::barycenter(spec.dim());
        integrate_with_probe(&spec, seed, &theta0, &IntegrationOptions::new(horizon, 1e-2), &mut |a, b| {
            steps.push((a, b))
        })
        .unwrap();
        for j in &jumps {
            prop_assert!(!steps.iter().any(|(a, b)| a < j && j < b));
            prop_assert!(steps.iter().any(|(a, _)| a == j));
        }
    }

    #[test]
    fn switching_estimates_shift_by_constant(
        spec in (2..=3usize).prop_flat_map(switching),
        seed in any::<u64>(),
        c in -3.0..3.0f64,
    ) {
        let base = estimate_lambda(&spec, seed, Method::ErgodicAverage, 20.0, 1e-2, None).unwrap();
        let moved = estimate_lambda(&spec.shifted(c), seed, Method::ErgodicAverage, 20.0, 1e-2, None).unwrap();
        prop_assert!((moved.value - base.value - c).abs() <= 1e-9);
        let base = estimate_lambda(&spec, seed, Method::LogNormGrowth, 20.0, 1e-2, None).unwrap();
        let moved = estimate_lambda(&spec.shifted(c), seed, Method::LogNormGrowth, 20.0, 1e-2, None).unwrap();
        prop_assert!((moved.value - base.value - c).abs() <= 1e-9);
    }

    #[test]
    fn periodic_estimates_shift_by_constant(spec in (2..=3usize).prop_flat_map(periodic), c in -3.0..3.0f64) {
        let shifted = spec.shifted(c);
        let fp = lambda_periodic_exact(&spec, 1e-2).unwrap().estimate.value;
        let fp_c = lambda_periodic_exact(&shifted, 1e-2).unwrap().estimate.value;
        prop_assert!((fp_c - fp - c).abs() <= 1e-9);
        let fl = lambda_floquet(&spec, 1e-2).unwrap().estimate.value;
        let fl_c = lambda_floquet(&shifted, 1e-2).unwrap().estimate.value;
        prop_assert!((fl_c - fl - c).abs() <= 1e-9);
    }

    #[test]
    fn constant_estimates_forget_initial_condition(
        (m, x, y) in (2..=4usize).prop_flat_map(|d| (irreducible(d), interior(d), interior(d)))
    ) {
        let spec = EnvironmentSpec::constant(MetzlerMatrix::new(m).unwrap());
        let a = estimate_lambda_from(&spec, 0, &x, Method::ErgodicAverage, 150.0, 1e-2, Some(50.0)).unwrap();
        let b = estimate_lambda_from(&spec, 0, &y, Method::ErgodicAverage, 150.0, 1e-2, Some(50.0)).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-6);
    }

    #[test]
    fn periodic_time_scaling_identity(
        phase in 0.0..1.0f64,
        scale in 0.01..100.0f64,
        t in 0.0..50.0f64,
    ) {
        let map = FourierMap::constant(Matrix::identity(1));
        let unit = EnvironmentSpec::periodic(phase, map).unwrap();
        let slow = unit.with_timescale(scale).unwrap();
        let (EnvState::Circle(a), EnvState::Circle(b)) =
            (env_state_at(&slow, 0, t).unwrap(), env_state_at(&unit, 0, t / scale).unwrap())
        else {
            panic!("periodic environments live on the circle");
        };
        prop_assert_eq!(a, b);
    }

    #[test]
    fn markov_jump_times_scale_exactly(spec in switching(2), seed in any::<u64>(), scale in 0.01..100.0f64) {
        let slow = spec.with_timescale(scale).unwrap();
        let unit_jumps = EnvironmentPath::new(&spec, seed).markov().unwrap().jump_times(20.0);
        let slow_jumps = EnvironmentPath::new(&slow, seed).markov().unwrap().jump_times(20.0 * scale);
        prop_assert!(slow_jumps.len() >= unit_jumps.len().saturating_sub(1));
        for (u, s) in unit_jumps.iter().zip(&slow_jumps) {
            prop_assert_eq!(u * scale, *s);
        }
    }
}
