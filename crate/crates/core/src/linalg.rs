//! Dense small-matrix primitives for cooperative (Metzler) linear systems.
//!
//! Everything here works on row-major `d × d` matrices with `d` at most a few
//! dozen. The Perron root is found by shifted power iteration, symmetric
//! spectra by cyclic Jacobi rotations, and the Birkhoff coefficient by
//! exhaustive enumeration of index quadruples.

use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use crate::error::{CoreError, Result};

/// Off-diagonal entries in `[-METZLER_CLAMP, 0)` are clamped to zero.
pub const METZLER_CLAMP: f64 = 1e-14;

/// Tolerance on `|Σθ - 1|` for simplex points.
pub const SIMPLEX_TOL: f64 = 1e-12;

const PERRON_TOL: f64 = 1e-13;
const PERRON_MAX_ITER: usize = 100_000;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Square dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    /// Builds a matrix from nested rows, rejecting empty or non-square input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(CoreError::InvalidMatrix("matrix has no rows".into()));
        }
        let mut data = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(CoreError::InvalidMatrix(format!(
                    "row {i} has length {} but the matrix has {dim} rows",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { dim, data })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out = self · x`
    #[inline]
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.data[i * d..(i + 1) * d];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.mul_vec_into(x, &mut out);
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let d = self.dim;
        let mut out = Matrix::zeros(d);
        matmul_into(self, other, &mut out);
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.dim, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        Matrix {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn add_identity(&self, c: f64) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.dim {
            m[(i, i)] += c;
        }
        m
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let d = self.dim;
        let mut sums = vec![0.0; d];
        for i in 0..d {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += self.data[i * d + j];
            }
        }
        sums
    }
}

/// `out = a · b`; `out` must not alias either operand.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let d = a.dim;
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a.data[i * d + k] * b.data[k * d + j];
            }
            out.data[i * d + j] = s;
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for i in 0..self.dim {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Returns whether every off-diagonal entry is nonnegative.
pub fn is_metzler(m: &Matrix) -> Result<bool> {
    if !m.is_finite() {
        return Err(CoreError::InvalidMatrix("non-finite entry".into()));
    }
    let d = m.dim();
    Ok((0..d).all(|i| (0..d).all(|j| i == j || m[(i, j)] >= 0.0)))
}

/// A finite square matrix with nonnegative off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetzlerMatrix(Matrix);

impl MetzlerMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        Self::with_context(m, "")
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Validates `m`, naming `context` in any violation. Off-diagonal entries
    /// within [`METZLER_CLAMP`] below zero are set to zero with a warning.
    pub fn with_context(mut m: Matrix, context: &str) -> Result<Self> {
        if m.dim() == 0 {
            return Err(CoreError::InvalidMatrix("dimension must be at least 1".into()));
        }
        if !m.is_finite() {
            return Err(CoreError::InvalidMatrix(format!("non-finite entry{context}")));
        }
        let d = m.dim();
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let v = m[(i, j)];
                if v < -METZLER_CLAMP {
                    return Err(CoreError::MetzlerViolation {
                        row: i,
                        col: j,
                        value: v,
                        context: context.to_string(),
                    });
                }
                if v < 0.0 {
                    log::warn!("clamping off-diagonal entry ({i}, {j}) = {v:e} to zero{context}");
                    m[(i, j)] = 0.0;
                }
            }
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// `self + c·I`, still Metzler.
    pub fn shifted(&self, c: f64) -> MetzlerMatrix {
        MetzlerMatrix(self.0.add_identity(c))
    }
}

impl Deref for MetzlerMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// A probability vector on the unit simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(CoreError::Domain("simplex point has no coordinates".into()));
        }
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(CoreError::Domain(format!(
                "simplex coordinates must be finite and nonnegative: {coords:?}"
            )));
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CoreError::Domain(format!(
                "simplex coordinates sum to {sum}, not 1"
            )));
        }
        Ok(Self(coords))
    }

    /// Scales a nonnegative, nonzero vector onto the simplex.
    pub fn normalize(mut v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(CoreError::Domain(format!(
                "cannot project {v:?} onto the simplex"
            )));
        }
        let sum: f64 = v.iter().sum();
        if !(sum > 0.0) {
            return Err(CoreError::Domain("cannot project the zero vector onto the simplex".into()));
        }
        v.iter_mut().for_each(|c| *c /= sum);
        Ok(Self(v))
    }

    pub fn barycenter(dim: usize) -> Self {
        Self(vec![1.0 / dim as f64; dim])
    }

    pub fn vertex(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|c| *c > 0.0)
    }

    pub fn l1_distance(&self, other: &SimplexPoint) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn max_distance(&self, other: &SimplexPoint) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl AsRef<[f64]> for SimplexPoint {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Spectral abscissa and Perron–Frobenius direction of an irreducible
/// Metzler matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronPair {
    pub lambda_max: f64,
    pub vector: SimplexPoint,
}

/// `reach[i][j]` is true when a positive chain leads from `i` to `j`
/// (an edge `j -> i` for every positive off-diagonal `m[i][j]`).
fn reachability(m: &Matrix) -> Vec<Vec<bool>> {
    let d = m.dim();
    let mut reach = vec![vec![false; d]; d];
    for (start, row) in reach.iter_mut().enumerate() {
        let mut stack = vec![start];
        row[start] = true;
        while let Some(j) = stack.pop() {
            for i in 0..d {
                if i != j && !row[i] && m[(i, j)] > 0.0 {
                    row[i] = true;
                    stack.push(i);
                }
            }
        }
    }
    reach
}

/// Strong connectivity of the positive-entry graph, by reachability.
pub fn is_irreducible(m: &Matrix) -> bool {
    let d = m.dim();
    if d <= 1 {
        return true;
    }
    let mark = |forward: bool| {
        let mut seen = vec![false; d];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in 0..d {
                let positive = if forward { m[(w, v)] } else { m[(v, w)] } > 0.0;
                if w != v && !seen[w] && positive {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    mark(true) && mark(false)
}

/// Strongly connected components, each as a sorted index list.
pub fn strongly_connected_components(m: &Matrix) -> Vec<Vec<usize>> {
    let d = m.dim();
    let reach = reachability(m);
    let mut assigned = vec![false; d];
    let mut comps = Vec::new();
    for i in 0..d {
        if assigned[i] {
            continue;
        }
        let comp: Vec<usize> = (i..d)
            .filter(|&j| !assigned[j] && reach[i][j] && reach[j][i])
            .collect();
        for &j in &comp {
            assigned[j] = true;
        }
        comps.push(comp);
    }
    comps
}

fn residual_inf(m: &Matrix, v: &[f64], lambda: f64) -> f64 {
    m.mul_vec(v)
        .iter()
        .zip(v)
        .fold(0.0, |r, (mv, vi)| r.max((mv - lambda * vi).abs()))
}

/// Perron root and simplex-normalized eigenvector of an irreducible Metzler
/// matrix, by power iteration on `m + rI` with `r = 1 + max |m_ii|`.
pub fn perron_eigenpair(m: &Matrix) -> Result<PerronPair> {
    if !m.is_finite() {
        return Err(CoreError::InvalidMatrix("non-finite entry".into()));
    }
    if !is_metzler(m)? {
        return Err(CoreError::Domain("Perron eigenpair needs a Metzler matrix".into()));
    }
    if !is_irreducible(m) {
        return Err(CoreError::Reducible(format!("{m}")));
    }
    let d = m.dim();
    if d == 1 {
        return Ok(PerronPair {
            lambda_max: m[(0, 0)],
            vector: SimplexPoint::barycenter(1),
        });
    }
    let shift = 1.0 + (0..d).fold(0.0_f64, |r, i| r.max(m[(i, i)].abs()));
    let shifted = m.add_identity(shift);
    let mut x = vec![1.0 / d as f64; d];
    let mut y = vec![0.0; d];
    let mut diff = f64::INFINITY;
    let mut converged = false;
    for _ in 0..PERRON_MAX_ITER {
        shifted.mul_vec_into(&x, &mut y);
        let s: f64 = y.iter().sum();
        y.iter_mut().for_each(|v| *v /= s);
        diff = x.iter().zip(&y).fold(0.0, |r, (a, b)| r.max((a - b).abs()));
        std::mem::swap(&mut x, &mut y);
        if diff < PERRON_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CoreError::IterationLimit {
            iterations: PERRON_MAX_ITER,
            residual: diff,
        });
    }

    let tolerance = 1e-10 * (1.0 + m.norm_inf());
    let mut lambda: f64 = m.mul_vec(&x).iter().sum();
    let mut residual = residual_inf(m, &x, lambda);
    if residual > tolerance {
        // slow power-iteration tail: polish with a few inverse-iteration steps
        if let Some((l, v)) = polish_by_inverse_iteration(m, lambda, &x) {
            let r = residual_inf(m, &v, l);
            if r < residual {
                lambda = l;
                residual = r;
                x = v;
            }
        }
    }
    if residual > tolerance {
        return Err(CoreError::PerronResidual {
            residual,
            tolerance,
        });
    }
    Ok(PerronPair {
        lambda_max: lambda,
        vector: SimplexPoint(x),
    })
}

fn polish_by_inverse_iteration(m: &Matrix, lambda: f64, x: &[f64]) -> Option<(f64, Vec<f64>)> {
    let d = m.dim();
    let sigma = lambda + 1e-9 * (1.0 + m.norm_inf());
    let shifted = m.add_identity(-sigma);
    let mut v = x.to_vec();
    for _ in 0..3 {
        let mut z = solve(&shifted, &v)?;
        let s: f64 = z.iter().sum();
        if !s.is_finite() || s == 0.0 {
            return None;
        }
        z.iter_mut().for_each(|c| *c /= s);
        if z.iter().any(|c| *c < 0.0) {
            return None;
        }
        v = z;
    }
    let l: f64 = m.mul_vec(&v).iter().sum();
    debug_assert_eq!(v.len(), d);
    Some((l, v))
}

/// Gaussian elimination with partial pivoting. `None` when singular.
pub(crate) fn solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let d = a.dim();
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..d {
        let pivot = (col..d).max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))?;
        if m[(pivot, col)] == 0.0 {
            return None;
        }
        if pivot != col {
            for k in 0..d {
                let tmp = m[(col, k)];
                m[(col, k)] = m[(pivot, k)];
                m[(pivot, k)] = tmp;
            }
            rhs.swap(col, pivot);
        }
        for row in col + 1..d {
            let factor = m[(row, col)] / m[(col, col)];
            if factor == 0.0 {
                continue;
            }
            for k in col..d {
                m[(row, k)] -= factor * m[(col, k)];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; d];
    for row in (0..d).rev() {
        let s: f64 = (row + 1..d).map(|k| m[(row, k)] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[(row, row)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Largest real part of the spectrum of a Metzler matrix, irreducible or not.
///
/// The spectrum of a reducible Metzler matrix is the union of the spectra of
/// its irreducible diagonal blocks in Frobenius normal form, so the abscissa
/// is the largest Perron root over the strongly connected components.
pub fn spectral_abscissa(m: &Matrix) -> Result<f64> {
    if is_irreducible(m) {
        return Ok(perron_eigenpair(m)?.lambda_max);
    }
    let mut best = f64::NEG_INFINITY;
    for comp in strongly_connected_components(m) {
        let block = Matrix::from_fn(comp.len(), |a, b| m[(comp[a], comp[b])]);
        best = best.max(perron_eigenpair(&block)?.lambda_max);
    }
    Ok(best)
}

/// Direction `lim e^{tM}·1 / ⟨e^{tM}·1, 1⟩` reached from the interior of the
/// simplex. For irreducible `m` this is the Perron vector; for reducible `m`
/// it is approximated by `exp(t(M - λI))·1` at `t = 1e6`, which resolves the
/// algebraic (Jordan-block) convergence to about `1e-6`.
pub fn dominant_direction(m: &Matrix) -> Result<SimplexPoint> {
    if is_irreducible(m) {
        return Ok(perron_eigenpair(m)?.vector);
    }
    let lambda = spectral_abscissa(m)?;
    let propagator = expm(&m.add_identity(-lambda).scaled(1e6));
    let v = propagator.mul_vec(&vec![1.0; m.dim()]);
    let v: Vec<f64> = v.into_iter().map(|c| c.max(0.0)).collect();
    SimplexPoint::normalize(v)
}

/// Extreme eigenvalues `(λ_min, λ_max)` of `(m + mᵀ)/2` by cyclic Jacobi.
pub fn symmetric_part_extremes(m: &Matrix) -> (f64, f64) {
    let d = m.dim();
    let mut a = Matrix::from_fn(d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off < JACOBI_TOL {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        (lo.min(a[(i, i)]), hi.max(a[(i, i)]))
    })
}

/// Hilbert projective distance between two strictly positive vectors.
pub fn hilbert_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.is_empty() {
        return Err(CoreError::Domain("empty vectors".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(CoreError::Domain(
            "Hilbert distance needs strictly positive finite coordinates".into(),
        ));
    }
    let (lo, hi) = x
        .iter()
        .zip(y)
        .map(|(a, b)| a / b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r), hi.max(r))
        });
    Ok((hi.ln() - lo.ln()).max(0.0))
}

/// Birkhoff contraction coefficient of a nonnegative matrix with positive
/// diagonal: `τ = (1 - √r)/(1 + √r)`, with `r` the minimum cross-ratio over
/// all index quadruples, and `τ = 1` as soon as any entry is zero.
pub fn birkhoff_tau(m: &Matrix) -> Result<f64> {
    let d = m.dim();
    if !m.is_finite() {
        return Err(CoreError::InvalidMatrix("non-finite entry".into()));
    }
    if let Some(v) = m.as_slice().iter().find(|v| **v < 0.0) {
        return Err(CoreError::Domain(format!(
            "Birkhoff coefficient needs nonnegative entries, found {v:e}"
        )));
    }
    if (0..d).any(|i| !(m[(i, i)] > 0.0)) {
        return Err(CoreError::Domain(
            "Birkhoff coefficient needs a positive diagonal".into(),
        ));
    }
    if m.as_slice().contains(&0.0) {
        return Ok(1.0);
    }
    let mut r = f64::INFINITY;
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let ratio = (m[(i, k)] * m[(j, l)]) / (m[(j, k)] * m[(i, l)]);
                    r = r.min(ratio);
                }
            }
        }
    }
    let root = r.min(1.0).sqrt();
    Ok((1.0 - root) / (1.0 + root))
}

/// Matrix exponential by Taylor scaling and squaring.
pub fn expm(m: &Matrix) -> Matrix {
    let d = m.dim();
    let norm = m.norm_inf();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let a = m.scaled(0.5f64.powi(squarings));
    let mut result = Matrix::identity(d);
    let mut term = Matrix::identity(d);
    let mut scratch = Matrix::zeros(d);
    for k in 1..=30 {
        matmul_into(&term, &a, &mut scratch);
        term = scratch.scaled(1.0 / k as f64);
        result = result.add(&term);
        if term.max_abs() <= f64::EPSILON * result.max_abs() {
            break;
        }
    }
    for _ in 0..squarings {
        matmul_into(&result, &result, &mut scratch);
        std::mem::swap(&mut result, &mut scratch);
    }
    result
}
