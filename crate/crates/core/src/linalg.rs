//! Dense linear-algebra helpers shared by the dynamics and the controller.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}×{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("singular system")]
    Singular,
    #[error("solve residual {residual:.3e} exceeds {limit:.1e}")]
    IllConditioned { residual: f64, limit: f64 },
    #[error("spectral radius did not converge after {iterations} iterations (best estimate {estimate})")]
    NoConvergence { iterations: usize, estimate: f64 },
}

/// Options for [`spectral_radius_with`].
#[derive(Debug, Clone, Copy)]
pub struct SpectralOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    spectral_radius_with(m, SpectralOptions::default())
}

/// Largest eigenvalue modulus.
///
/// Elementwise-nonnegative matrices (every matrix in the traffic model) use
/// shifted inverse iteration towards the Perron root, bracketed by
/// Collatz–Wielandt bounds `min (Mx)_i/x_i ≤ ρ ≤ max (Mx)_i/x_i`; iteration
/// stops once the bracket is narrower than `tol`. When the bracket cannot be
/// formed (reducible matrix, zero iterate entries) or for matrices with
/// negative entries, the eigenvalues are taken from a real Schur
/// decomposition instead.
pub fn spectral_radius_with(m: &DMatrix<f64>, opts: SpectralOptions) -> Result<f64, LinalgError> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Ok(0.0);
    }
    if m.iter().all(|&v| v >= 0.0) {
        if let Some(r) = perron_root(m, opts) {
            return Ok(r);
        }
    }
    schur_radius(m)
}

fn schur_radius(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    let n = m.nrows();
    let eig = m
        .clone()
        .try_schur(f64::EPSILON, 200 * n.max(10))
        .map(|s| s.complex_eigenvalues())
        .ok_or(LinalgError::NoConvergence {
            iterations: 200 * n.max(10),
            estimate: f64::NAN,
        })?;
    Ok(eig.iter().map(|c: &Complex<f64>| c.norm()).fold(0.0, f64::max))
}

/// Collatz–Wielandt bracket for a positive vector; `None` if some entry of
/// `x` vanishes.
fn cw_bounds(m: &DMatrix<f64>, x: &DVector<f64>) -> Option<(f64, f64)> {
    let mx = m * x;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (a, b) in mx.iter().zip(x.iter()) {
        if *b <= 0.0 {
            return None;
        }
        let r = a / b;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Some((lo, hi))
}

fn perron_root(m: &DMatrix<f64>, opts: SpectralOptions) -> Option<f64> {
    let n = m.nrows();
    let scale = m.iter().fold(0.0f64, |a, &v| a.max(v));
    if scale == 0.0 {
        return Some(0.0);
    }
    // A few power steps on M + I to get a positive iterate and an initial bracket.
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..8 {
        let y = m * &x + &x;
        let norm = y.norm();
        if norm == 0.0 {
            return None;
        }
        x = y / norm;
    }
    let (mut lo, mut hi) = cw_bounds(m, &x)?;
    if hi - lo <= opts.tol * hi.max(1.0) {
        return Some(0.5 * (lo + hi));
    }
    for _ in 0..opts.max_iter {
        // sigma > rho keeps (sigma I - M)^-1 nonnegative, so iterates stay positive.
        let sigma = hi + (hi - lo).max(hi * 1e-9).max(1e-300);
        let shifted = DMatrix::identity(n, n) * sigma - m;
        let lu = shifted.lu();
        let mut y = lu.solve(&x)?;
        let norm = y.norm();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        y /= norm;
        let (l, h) = cw_bounds(m, &y)?;
        lo = lo.max(l);
        hi = hi.min(h);
        x = y;
        if hi - lo <= opts.tol * hi.max(1.0) {
            return Some(0.5 * (lo + hi));
        }
    }
    None
}

/// Solves `m · X = rhs` by LU and rejects the result when the relative
/// residual exceeds `limit`.
pub fn guarded_solve(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    limit: f64,
) -> Result<DMatrix<f64>, LinalgError> {
    let lu = m.clone().lu();
    let x = lu.solve(rhs).ok_or(LinalgError::Singular)?;
    let residual = relative_residual(m, &x, rhs);
    if !(residual <= limit) {
        return Err(LinalgError::IllConditioned { residual, limit });
    }
    Ok(x)
}

pub fn guarded_solve_vec(
    m: &DMatrix<f64>,
    rhs: &DVector<f64>,
    limit: f64,
) -> Result<DVector<f64>, LinalgError> {
    let lu = m.clone().lu();
    let x = lu.solve(rhs).ok_or(LinalgError::Singular)?;
    let r = m * &x - rhs;
    let denom = (m.amax() * x.amax()).max(rhs.amax()).max(f64::MIN_POSITIVE);
    let residual = r.amax() / denom;
    if !(residual <= limit) {
        return Err(LinalgError::IllConditioned { residual, limit });
    }
    Ok(x)
}

fn relative_residual(m: &DMatrix<f64>, x: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    let r = m * x - rhs;
    let denom = (m.amax() * x.amax()).max(rhs.amax()).max(f64::MIN_POSITIVE);
    r.amax() / denom
}

/// Infinity norm (maximum absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Writes `row,col,value` triples (zero-based indices) for every entry.
pub fn write_triples<W: std::io::Write>(mut w: W, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(w, "row,col,value")?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            writeln!(w, "{r},{c},{}", m[(r, c)])?;
        }
    }
    Ok(())
}
