//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command as Process;

use coopdyn_core::dynamics::{integrate, synchronized_pair_distance};
use coopdyn_core::environment::{EnvironmentSpec, FourierMap};
use coopdyn_core::linalg::{
    birkhoff_tau, hilbert_distance, is_irreducible, perron_eigenpair, Matrix, MetzlerMatrix, SimplexPoint,
};
use coopdyn_core::lyapunov::{
    corollary_bounds, estimate_lambda, lambda_floquet, lambda_periodic_exact, LambdaEstimate, Method,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    results: Vec<(usize, bool)>,
    /// Largest `|Σθ − 1|` seen in any run.
    defect: f64,
}

impl Report {
    fn record(&mut self, id: usize, title: &str, pass: bool, detail: String) {
        println!("criterion {id} [{}] {title}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((id, pass));
    }

    fn track(&mut self, est: &LambdaEstimate) {
        self.defect = self.defect.max(est.simplex_defect);
    }
}

/// Irreducible Metzler matrix with entries in [-5, 5].
fn random_irreducible(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    loop {
        let m = Matrix::from_fn(d, |i, j| {
            if i == j {
                rng.random_range(-5.0..5.0)
            } else if rng.random_bool(0.7) {
                rng.random_range(0.0..5.0)
            } else {
                0.0
            }
        });
        if is_irreducible(&m) {
            return m;
        }
    }
}

/// Periodic system with up to `k_max` harmonics whose off-diagonal entries
/// stay positive.
fn random_periodic(rng: &mut ChaCha8Rng, d: usize, k_max: u32) -> EnvironmentSpec {
    let base = Matrix::from_fn(d, |i, j| {
        if i == j {
            rng.random_range(-3.0..3.0)
        } else {
            rng.random_range(0.5..3.0)
        }
    });
    let k = rng.random_range(1..=k_max);
    let mut map = FourierMap::constant(base.clone());
    for order in 1..=k {
        // off-diagonal amplitude at most 0.45·base per coefficient and harmonic
        let scale = 0.45 / k as f64;
        let coeff = |rng: &mut ChaCha8Rng| {
            Matrix::from_fn(d, |i, j| {
                let x: f64 = rng.random_range(-1.0..1.0);
                if i == j {
                    x
                } else {
                    x * scale * base[(i, j)]
                }
            })
        };
        let (c, s) = (coeff(rng), coeff(rng));
        map = map.with_harmonic(0, order, Some(c), Some(s)).unwrap();
    }
    EnvironmentSpec::periodic(rng.random_range(0.0..1.0), map).unwrap()
}

fn random_switching(rng: &mut ChaCha8Rng, d: usize) -> EnvironmentSpec {
    let n = rng.random_range(2..=3);
    let rates = Matrix::from_fn(n, |i, j| if i == j { 0.0 } else { rng.random_range(0.2..3.0) });
    let tab = (0..n)
        .map(|_| MetzlerMatrix::new(random_irreducible(rng, d)).unwrap())
        .collect();
    EnvironmentSpec::markov_switch(rates, 0, tab).unwrap()
}

fn destabilization_pair() -> EnvironmentSpec {
    let rates = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
    let tab = vec![
        MetzlerMatrix::from_rows(&[[-1.0, 0.0], [10.0, -1.0]]).unwrap(),
        MetzlerMatrix::from_rows(&[[-1.0, 10.0], [0.0, -1.0]]).unwrap(),
    ];
    EnvironmentSpec::markov_switch(rates, 0, tab).unwrap()
}

fn constant_recovery(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let d = 2 + i % 3;
        let m = random_irreducible(&mut rng, d);
        let exact = perron_eigenpair(&m).unwrap().lambda_max;
        let spec = EnvironmentSpec::constant(MetzlerMatrix::new(m).unwrap());
        let est = estimate_lambda(&spec, i as u64, Method::ErgodicAverage, 200.0, 1e-3, Some(20.0)).unwrap();
        r.track(&est);
        worst = worst.max((est.value - exact).abs());
    }
    r.record(1, "constant-system recovery", worst <= 1e-3, format!("max |error| = {worst:.3e} (tol 1e-3)"));
}

fn periodic_agreement(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut exact_gap, mut ergodic_gap, mut dir_gap) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..10 {
        let spec = random_periodic(&mut rng, 2 + i % 3, 2);
        let fp = lambda_periodic_exact(&spec, 1e-3).unwrap();
        let fl = lambda_floquet(&spec, 1e-3).unwrap();
        let ea = estimate_lambda(&spec, i as u64, Method::ErgodicAverage, 500.0, 1e-3, None).unwrap();
        r.track(&ea);
        exact_gap = exact_gap.max((fp.estimate.value - fl.estimate.value).abs());
        ergodic_gap = ergodic_gap.max((fl.estimate.value - ea.value).abs());
        dir_gap = dir_gap.max(fl.direction.max_distance(&fp.theta_star));
    }
    let pass = exact_gap <= 1e-6 && ergodic_gap <= 1e-3;
    r.record(
        2,
        "periodic three-way agreement",
        pass,
        format!(
            "max |fixed point - Floquet| = {exact_gap:.3e} (tol 1e-6), max |Floquet - ergodic| = {ergodic_gap:.3e} (tol 1e-3), direction gap {dir_gap:.1e}"
        ),
    );
}

fn fast_regime(r: &mut Report) {
    let spec = destabilization_pair().with_timescale(1e-3).unwrap();
    let est = estimate_lambda(&spec, 3, Method::ErgodicAverage, 200.0, 1e-3, None).unwrap();
    r.track(&est);
    let err = (est.value - 4.0).abs();
    r.record(3, "fast-regime limit", err <= 0.05, format!("T = 1e-3: {:.5} vs 4.0 (tol 0.05)", est.value));
}

fn slow_regime(r: &mut Report) {
    let spec = destabilization_pair().with_timescale(1e3).unwrap();
    let est = estimate_lambda(&spec, 4, Method::ErgodicAverage, 1e5, 1e-2, None).unwrap();
    r.track(&est);
    let err = (est.value + 1.0).abs();
    r.record(4, "slow-regime limit", err <= 0.05, format!("T = 1e3: {:.5} vs -1.0 (tol 0.05)", est.value));
}

fn sandwich(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut checked = 0;
    for i in 0..100u64 {
        let d = 2 + (i as usize) % 3;
        let (spec, periodic) = match i % 3 {
            0 => (EnvironmentSpec::constant(MetzlerMatrix::new(random_irreducible(&mut rng, d)).unwrap()), true),
            1 => (random_periodic(&mut rng, d, 2), true),
            _ => (random_switching(&mut rng, d), false),
        };
        let bounds = corollary_bounds(&spec).unwrap();
        let mut estimates = Vec::new();
        for method in [Method::ErgodicAverage, Method::LogNormGrowth] {
            let est = estimate_lambda(&spec, i, method, 200.0, 1e-2, None).unwrap();
            r.track(&est);
            estimates.push(est);
        }
        if periodic {
            estimates.push(lambda_periodic_exact(&spec, 1e-2).unwrap().estimate);
            estimates.push(lambda_floquet(&spec, 1e-2).unwrap().estimate);
        }
        for est in &estimates {
            checked += 1;
            if !bounds.contains(est.value, 2.0 * est.half_split_gap + 1e-3) {
                violations += 1;
            }
        }
    }
    r.record(
        5,
        "bound sandwich",
        violations == 0,
        format!("{violations} violations over {checked} estimates on 100 systems"),
    );
}

fn contraction(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut birkhoff = 0;
    for _ in 0..100 {
        let d = rng.random_range(2..=5);
        let m = Matrix::from_fn(d, |_, _| rng.random_range(0.01..5.0));
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
        let tau = birkhoff_tau(&m).unwrap();
        let before = hilbert_distance(&x, &y).unwrap();
        let after = hilbert_distance(&m.mul_vec(&x), &m.mul_vec(&y)).unwrap();
        if after > tau * before + 1e-9 {
            birkhoff += 1;
        }
    }
    let mut sup = 0;
    for _ in 0..100 {
        let d = rng.random_range(2..=6);
        let x = SimplexPoint::normalize((0..d).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let y = SimplexPoint::normalize((0..d).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let dh = hilbert_distance(x.coords(), y.coords()).unwrap();
        if x.max_distance(&y) > dh.exp_m1() + 1e-15 {
            sup += 1;
        }
    }
    let mut sync = 0;
    let mut worst = 0.0f64;
    for i in 0..10 {
        let d = 2 + i % 3;
        let m = Matrix::from_fn(d, |i, j| {
            if i == j {
                rng.random_range(-5.0..5.0)
            } else {
                rng.random_range(0.5..5.0)
            }
        });
        let spec = EnvironmentSpec::constant(MetzlerMatrix::new(m).unwrap());
        let x = SimplexPoint::normalize((0..d).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let y = SimplexPoint::normalize((0..d).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let dist = synchronized_pair_distance(&spec, i as u64, &x, &y, 50.0, 1e-3).unwrap();
        let last = dist.last().unwrap().1;
        worst = worst.max(last);
        if last >= 1e-6 {
            sync += 1;
        }
    }
    let total = birkhoff + sup + sync;
    r.record(
        6,
        "contraction suite",
        total == 0,
        format!(
            "violations: Birkhoff {birkhoff}/100, sup-distance {sup}/100, synchronized pairs {sync}/10 (worst final d_H {worst:.1e})"
        ),
    );
}

fn scalar_exactness(r: &mut Report) {
    let rates = Matrix::from_rows(&[[0.0, 1.0], [2.0, 0.0]]).unwrap();
    let tab = vec![
        MetzlerMatrix::from_rows(&[[-1.0]]).unwrap(),
        MetzlerMatrix::from_rows(&[[1.0]]).unwrap(),
    ];
    let spec = EnvironmentSpec::markov_switch(rates, 0, tab).unwrap();
    let est = estimate_lambda(&spec, 7, Method::ErgodicAverage, 1e4, 1e-2, None).unwrap();
    r.track(&est);
    let err = (est.value + 1.0 / 3.0).abs();
    r.record(7, "scalar exactness", err <= 0.02, format!("{:.5} vs -1/3 (tol 0.02)", est.value));
}

fn step_halving_ratio() -> f64 {
    let map = FourierMap::constant(Matrix::from_rows(&[[-1.0, 2.0], [1.0, -0.5]]).unwrap())
        .with_harmonic(
            0,
            1,
            Some(Matrix::from_rows(&[[1.0, 1.5], [0.5, -1.0]]).unwrap()),
            Some(Matrix::from_rows(&[[0.0, 0.5], [0.8, 2.0]]).unwrap()),
        )
        .unwrap();
    let spec = EnvironmentSpec::periodic(0.0, map).unwrap();
    let theta0 = SimplexPoint::vertex(2, 0);
    let end = |h: f64| *integrate(&spec, 0, &theta0, 2.0, h).unwrap().log_rho.last().unwrap();
    let (a, b, c) = (end(0.1), end(0.05), end(0.025));
    (a - b) / (b - c)
}

/// Result lines of a CSV file, or the payload of a JSON file.
fn payload(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    if text.trim_start().starts_with('{') {
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["payload"].to_string()
    } else {
        text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
    }
}

fn rerun_mismatches() -> Vec<String> {
    let dir = tempfile::tempdir().unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<_> = fs::read_dir(&configs).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut bad = Vec::new();
    for cfg in files.iter().filter(|p| p.extension().is_some_and(|e| e == "toml")) {
        let text = fs::read_to_string(cfg).unwrap();
        let command = coopdyn_cli::parse_config(&text).unwrap().command;
        let name = cfg.file_stem().unwrap().to_string_lossy().to_string();
        let mut outs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{name}.{k}"));
            let status = Process::new(env!("CARGO_BIN_EXE_coopdyn"))
                .args([command.name(), "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()])
                .status()
                .unwrap();
            if !status.success() {
                bad.push(format!("{name} exited with {status}"));
            }
            outs.push(payload(&out));
        }
        if outs[0] != outs[1] {
            bad.push(format!("{name} payload differs between runs"));
        }
    }
    bad
}

fn hygiene(r: &mut Report) {
    let ratio = step_halving_ratio();
    let mismatches = rerun_mismatches();
    let pass = r.defect <= 1e-12 && (8.0..=32.0).contains(&ratio) && mismatches.is_empty();
    let reruns = if mismatches.is_empty() {
        "all reruns byte-identical".to_string()
    } else {
        mismatches.join("; ")
    };
    r.record(
        8,
        "numerical hygiene",
        pass,
        format!("max simplex defect {:.1e} (tol 1e-12), step-halving ratio {ratio:.2} (in [8, 32]), {reruns}", r.defect),
    );
}

fn phase_invariance(r: &mut Report) {
    let map = FourierMap::constant(Matrix::from_rows(&[[-1.0, 1.0, 0.5], [2.0, -0.5, 0.0], [0.5, 1.0, 0.0]]).unwrap())
        .with_harmonic(0, 1, Some(Matrix::from_rows(&[[1.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.2, 0.0, -1.0]]).unwrap()), None)
        .unwrap()
        .with_harmonic(1, 1, None, Some(Matrix::from_rows(&[[0.0, 0.0, 0.2], [1.0, -1.0, 0.0], [0.0, 0.5, 0.5]]).unwrap()))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut values = Vec::new();
    let mut max_gap = 0.0f64;
    for _ in 0..5 {
        let phases = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let spec = EnvironmentSpec::quasi_periodic(vec![1.0, 2f64.sqrt()], phases, map.clone()).unwrap();
        let est = estimate_lambda(&spec, 0, Method::ErgodicAverage, 1000.0, 1e-3, None).unwrap();
        r.track(&est);
        max_gap = max_gap.max(est.half_split_gap);
        values.push(est.value);
    }
    let spread = values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - values.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 2.0 * max_gap + 1e-3;
    r.record(
        9,
        "quasi-periodic phase invariance",
        spread <= tol,
        format!("pairwise spread {spread:.3e} (tol {tol:.3e})"),
    );
}

#[test]
fn acceptance() {
    let mut r = Report {
        results: Vec::new(),
        defect: 0.0,
    };
    constant_recovery(&mut r);
    periodic_agreement(&mut r);
    fast_regime(&mut r);
    slow_regime(&mut r);
    sandwich(&mut r);
    contraction(&mut r);
    scalar_exactness(&mut r);
    phase_invariance(&mut r);
    hygiene(&mut r);
    let failed: Vec<usize> = r.results.iter().filter(|(_, p)| !p).map(|(i, _)| *i).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
