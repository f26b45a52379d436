//! Dense strictly convex quadratic programs.
//!
//! ```text
//!     minimize     ½ uᵀ W1 u + W2ᵀ u
//!     subject to   A_ineq u + b_ineq ≤ 0
//!                  A_eq   u + b_eq   = 0
//! ```
//!
//! Solved with the Goldfarb–Idnani dual active-set method: start from the
//! unconstrained minimizer and repeatedly add the most violated constraint,
//! dropping active inequalities whose multipliers would turn negative. Each
//! primal iterate is optimal for the constraints currently active, so the
//! first iterate that violates nothing is the solution. A violated constraint
//! that can be neither reached nor traded against the active set yields a
//! Farkas certificate of infeasibility.

use std::io;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("W1 is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("W1 is not positive definite (smallest eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub w1: DMatrix<f64>,
    pub w2: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        w1: DMatrix<f64>,
        w2: DVector<f64>,
        a_ineq: DMatrix<f64>,
        b_ineq: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = QpProblem {
            w1,
            w2,
            a_ineq,
            b_ineq,
            a_eq,
            b_eq,
        };
        p.check_dimensions()?;
        Ok(p)
    }

    /// Problem without constraints of either kind.
    pub fn unconstrained(w1: DMatrix<f64>, w2: DVector<f64>) -> Result<Self, QpError> {
        let n = w2.len();
        Self::new(
            w1,
            w2,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        )
    }

    pub fn n_var(&self) -> usize {
        self.w2.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.b_ineq.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.w1 * u)) + self.w2.dot(u)
    }

    fn check_dimensions(&self) -> Result<(), QpError> {
        let n = self.w2.len();
        let dims = [
            ("W1 rows", self.w1.nrows(), n),
            ("W1 cols", self.w1.ncols(), n),
            ("A_ineq cols", self.a_ineq.ncols(), n),
            ("b_ineq", self.b_ineq.len(), self.a_ineq.nrows()),
            ("A_eq cols", self.a_eq.ncols(), n),
            ("b_eq", self.b_eq.len(), self.a_eq.nrows()),
        ];
        for (what, got, expected) in dims {
            if got != expected {
                return Err(QpError::Dimension(format!(
                    "{what} is {got}, expected {expected}"
                )));
            }
        }
        Ok(())
    }

    /// Writes `w1.csv`, `w2.csv`, `a_ineq.csv`, `b_ineq.csv`, `a_eq.csv` and
    /// `b_eq.csv` as `row,col,value` triples into `dir`.
    pub fn write_csv(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let vec = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let parts = [
            ("w1.csv", self.w1.clone()),
            ("w2.csv", vec(&self.w2)),
            ("a_ineq.csv", self.a_ineq.clone()),
            ("b_ineq.csv", vec(&self.b_ineq)),
            ("a_eq.csv", self.a_eq.clone()),
            ("b_eq.csv", vec(&self.b_eq)),
        ];
        for (name, m) in parts {
            let f = io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            linalg::write_triples(f, &m)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Bound on every KKT residual for an `Optimal` status.
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            kkt_tol: 1e-8,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIter => "max_iter",
        }
    }
}

/// Infinity-norm KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `‖W1 u + W2 + A_ineqᵀ λ + A_eqᵀ ν‖`
    pub stationarity: f64,
    /// `‖A_eq u + b_eq‖`
    pub primal_eq: f64,
    /// `max(0, max_i (A_ineq u + b_ineq)_i)`
    pub primal_ineq: f64,
    /// `max_i |λ_i (A_ineq u + b_ineq)_i|`
    pub complementarity: f64,
    /// `max(0, −min λ)`
    pub dual_infeasibility: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
            .max(self.dual_infeasibility)
    }
}

/// Farkas certificate: `μ ≥ 0`, `A_ineqᵀ μ + A_eqᵀ η = 0` and
/// `μᵀ b_ineq + ηᵀ b_eq > 0`, which no feasible `u` admits.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityCertificate {
    pub ineq: DVector<f64>,
    pub eq: DVector<f64>,
    /// Inequality rows with nonzero weight.
    pub support: Vec<usize>,
}

impl InfeasibilityCertificate {
    /// `(‖A_ineqᵀ μ + A_eqᵀ η‖∞, μᵀ b_ineq + ηᵀ b_eq)`.
    pub fn verify(&self, p: &QpProblem) -> (f64, f64) {
        let combo = p.a_ineq.tr_mul(&self.ineq) + p.a_eq.tr_mul(&self.eq);
        let gap = self.ineq.dot(&p.b_ineq) + self.eq.dot(&p.b_eq);
        (combo.amax(), gap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    /// Inequality multipliers `λ ≥ 0`.
    pub lambda: DVector<f64>,
    /// Equality multipliers `ν`.
    pub nu: DVector<f64>,
    /// Active inequality rows at termination.
    pub active: Vec<usize>,
    pub certificate: Option<InfeasibilityCertificate>,
}

/// Constraint `nᵀu ≥ b` in the solver's internal orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Row {
    Ineq(usize),
    /// Equality row, with `flip` when the normal was negated on entry.
    Eq { index: usize, flip: bool },
}

struct Active {
    rows: Vec<Row>,
    normals: Vec<DVector<f64>>,
    /// `W1^-1 n` for each active normal.
    g_inv_n: Vec<DVector<f64>>,
    lambda: Vec<f64>,
}

impl Active {
    fn new() -> Self {
        Active {
            rows: Vec::new(),
            normals: Vec::new(),
            g_inv_n: Vec::new(),
            lambda: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn remove(&mut self, k: usize) {
        self.rows.remove(k);
        self.normals.remove(k);
        self.g_inv_n.remove(k);
        self.lambda.remove(k);
    }

    /// `r = (Nᵀ G⁻¹ N)⁻¹ Nᵀ G⁻¹ n` and `z = G⁻¹(n − N r)`.
    fn directions(&self, g_inv_np: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let q = self.len();
        if q == 0 {
            return Some((g_inv_np.clone(), DVector::zeros(0)));
        }
        let mut m = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..=i {
                let v = self.normals[i].dot(&self.g_inv_n[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let rhs = DVector::from_iterator(q, self.normals.iter().map(|n| n.dot(g_inv_np)));
        let r = match Cholesky::new(m.clone()) {
            Some(ch) => ch.solve(&rhs),
            None => m.lu().solve(&rhs)?,
        };
        let mut z = g_inv_np.clone();
        for (gn, &rj) in self.g_inv_n.iter().zip(r.iter()) {
            z.axpy(-rj, gn, 1.0);
        }
        Some((z, r))
    }
}

fn factor(w1: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, QpError> {
    let asym = (w1 - w1.transpose()).amax();
    if asym > 1e-12 * w1.amax().max(1.0) {
        return Err(QpError::NotSymmetric(asym));
    }
    Cholesky::new(w1.clone()).ok_or_else(|| {
        let min = SymmetricEigen::new(w1.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        QpError::NotPositiveDefinite(min)
    })
}

pub fn solve(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    solve_warm(p, opts, &[])
}

/// Like [`solve`]; inequality rows listed in `warm_active` (typically the
/// previous step's active set) are considered first when several are
/// violated. The result does not depend on the hint beyond the path taken.
pub fn solve_warm(
    p: &QpProblem,
    opts: &QpOptions,
    warm_active: &[usize],
) -> Result<QpSolution, QpError> {
    p.check_dimensions()?;
    let chol = factor(&p.w1)?;
    let viol_tol = 0.1 * opts.kkt_tol;

    let mut u = -chol.solve(&p.w2);
    let mut active = Active::new();
    let mut iterations = 0usize;
    let mut skipped_eq = vec![false; p.n_eq()];
    let mut preferred = vec![false; p.n_ineq()];
    for &i in warm_active {
        if i < preferred.len() {
            preferred[i] = true;
        }
    }

    let row_of = |row: Row| -> (DVector<f64>, f64) {
        match row {
            Row::Ineq(i) => (-p.a_ineq.row(i).transpose(), p.b_ineq[i]),
            Row::Eq { index, flip } => {
                let sign = if flip { -1.0 } else { 1.0 };
                (p.a_eq.row(index).transpose() * sign, -p.b_eq[index] * sign)
            }
        }
    };

    loop {
        // Pick the next constraint to add: equalities first, then the most
        // violated inequality (preferring warm-start rows).
        let mut next: Option<Row> = None;
        for e in 0..p.n_eq() {
            let in_set = active
                .rows
                .iter()
                .any(|r| matches!(r, Row::Eq { index, .. } if *index == e));
            if in_set || skipped_eq[e] {
                continue;
            }
            let s = p.a_eq.row(e).dot(&u.transpose()) + p.b_eq[e];
            next = Some(Row::Eq {
                index: e,
                flip: s > 0.0,
            });
            break;
        }
        if next.is_none() && p.n_ineq() > 0 {
            let slack = &p.a_ineq * &u + &p.b_ineq;
            // an active row can drift past the threshold by roundoff; re-adding it cycles
            let mut in_set = vec![false; p.n_ineq()];
            for r in &active.rows {
                if let Row::Ineq(i) = *r {
                    in_set[i] = true;
                }
            }
            let mut best: Option<(bool, f64, usize)> = None;
            for (i, &s) in slack.iter().enumerate() {
                if s > viol_tol && !in_set[i] {
                    let key = (preferred[i], s);
                    if best.is_none_or(|(bp, bs, _)| (key.0, key.1) > (bp, bs)) {
                        best = Some((key.0, key.1, i));
                    }
                }
            }
            next = best.map(|(_, _, i)| Row::Ineq(i));
        }
        let Some(row) = next else {
            break;
        };

        let (np, bp) = row_of(row);
        let g_inv_np = chol.solve(&np);
        let mut lambda_p = 0.0;
        loop {
            iterations += 1;
            if iterations > opts.max_iter {
                return Ok(finish(p, u, &active, QpStatus::MaxIter, iterations, None));
            }
            let s_p = np.dot(&u) - bp;
            let Some((z, r)) = active.directions(&g_inv_np) else {
                return Ok(finish(p, u, &active, QpStatus::MaxIter, iterations, None));
            };
            let zn = z.dot(&np);
            let curvature = np.dot(&g_inv_np);
            let z_is_zero = zn <= 1e-13 * curvature;

            // Largest dual step keeping active inequality multipliers ≥ 0.
            let mut t1 = f64::INFINITY;
            let mut block = None;
            for (k, (&rj, row)) in r.iter().zip(&active.rows).enumerate() {
                if matches!(row, Row::Ineq(_)) && rj > 0.0 {
                    let t = active.lambda[k] / rj;
                    if t < t1 {
                        t1 = t;
                        block = Some(k);
                    }
                }
            }
            let t2 = if z_is_zero { f64::INFINITY } else { -s_p / zn };

            if z_is_zero && t1.is_infinite() {
                if let Row::Eq { index, .. } = row {
                    if s_p.abs() <= viol_tol {
                        // linearly dependent and consistent: already implied
                        skipped_eq[index] = true;
                        break;
                    }
                }
                let cert = certificate(p, &active, row, &r);
                return Ok(finish(p, u, &active, QpStatus::Infeasible, iterations, Some(cert)));
            }

            let t = t1.min(t2);
            if !z_is_zero {
                u.axpy(t, &z, 1.0);
            }
            for (lam, &rj) in active.lambda.iter_mut().zip(r.iter()) {
                *lam -= t * rj;
            }
            lambda_p += t;

            if t2 <= t1 {
                active.rows.push(row);
                active.normals.push(np.clone());
                active.g_inv_n.push(g_inv_np.clone());
                active.lambda.push(lambda_p);
                break;
            }
            let k = block.expect("finite t1 has a blocking row");
            active.remove(k);
        }
    }

    let u = polish(p, u, &mut active);
    Ok(finish(p, u, &active, QpStatus::Optimal, iterations, None))
}

/// Re-solves the KKT system of the final active set exactly by LU and keeps
/// the result when it does not worsen the residuals.
fn polish(p: &QpProblem, u: DVector<f64>, active: &mut Active) -> DVector<f64> {
    let n = p.n_var();
    let q = active.len();
    let mut kkt = DMatrix::zeros(n + q, n + q);
    let mut rhs = DVector::zeros(n + q);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.w1);
    for (k, nk) in active.normals.iter().enumerate() {
        kkt.view_mut((0, n + k), (n, 1)).copy_from(&(-nk));
        kkt.view_mut((n + k, 0), (1, n)).copy_from(&nk.transpose());
    }
    rhs.rows_mut(0, n).copy_from(&(-&p.w2));
    for (k, row) in active.rows.iter().enumerate() {
        rhs[n + k] = match *row {
            Row::Ineq(i) => p.b_ineq[i],
            Row::Eq { index, flip } => -p.b_eq[index] * if flip { -1.0 } else { 1.0 },
        };
    }
    let Some(sol) = kkt.lu().solve(&rhs) else {
        return u;
    };
    let polished = sol.rows(0, n).into_owned();
    let lambda: Vec<f64> = sol.rows(n, q).iter().copied().collect();
    let dual_ok = active
        .rows
        .iter()
        .zip(&lambda)
        .all(|(r, &l)| matches!(r, Row::Eq { .. }) || l >= 0.0);
    let before = residuals_from_active(p, &u, active, &active.lambda);
    let after = residuals_from_active(p, &polished, active, &lambda);
    if dual_ok && after.max() <= before.max() {
        active.lambda = lambda;
        polished
    } else {
        u
    }
}

fn multipliers(p: &QpProblem, active: &Active, lambda: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let mut lam = DVector::zeros(p.n_ineq());
    let mut nu = DVector::zeros(p.n_eq());
    for (row, &l) in active.rows.iter().zip(lambda) {
        match *row {
            Row::Ineq(i) => lam[i] = l,
            // internal normal is ±A_eq row; stationarity uses +A_eqᵀν
            Row::Eq { index, flip } => nu[index] = if flip { l } else { -l },
        }
    }
    (lam, nu)
}

fn residuals_from_active(
    p: &QpProblem,
    u: &DVector<f64>,
    active: &Active,
    lambda: &[f64],
) -> KktResiduals {
    let (lam, nu) = multipliers(p, active, lambda);
    residuals(p, u, &lam, &nu)
}

/// KKT residuals for a point and given multipliers.
pub fn residuals(
    p: &QpProblem,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> KktResiduals {
    let grad = &p.w1 * u + &p.w2 + p.a_ineq.tr_mul(lambda) + p.a_eq.tr_mul(nu);
    let slack = &p.a_ineq * u + &p.b_ineq;
    let eq = &p.a_eq * u + &p.b_eq;
    KktResiduals {
        stationarity: grad.amax(),
        primal_eq: eq.amax(),
        primal_ineq: slack.iter().copied().fold(0.0, f64::max),
        complementarity: slack
            .iter()
            .zip(lambda.iter())
            .map(|(s, l)| (s * l).abs())
            .fold(0.0, f64::max),
        dual_infeasibility: lambda.iter().map(|&l| -l).fold(0.0, f64::max),
    }
}

fn certificate(p: &QpProblem, active: &Active, row: Row, r: &DVector<f64>) -> InfeasibilityCertificate {
    // n_p − N r = 0 with r ≤ 0 on active inequalities: weights y_p = 1, y_j = −r_j.
    let mut ineq = DVector::zeros(p.n_ineq());
    let mut eq = DVector::zeros(p.n_eq());
    let mut add = |row: Row, y: f64| match row {
        Row::Ineq(i) => ineq[i] += y.max(0.0),
        Row::Eq { index, flip } => eq[index] += if flip { y } else { -y },
    };
    add(row, 1.0);
    for (&rj, &rw) in r.iter().zip(&active.rows) {
        add(rw, -rj);
    }
    let support = (0..p.n_ineq()).filter(|&i| ineq[i] > 0.0).collect();
    InfeasibilityCertificate { ineq, eq, support }
}

fn finish(
    p: &QpProblem,
    u: DVector<f64>,
    active: &Active,
    status: QpStatus,
    iterations: usize,
    certificate: Option<InfeasibilityCertificate>,
) -> QpSolution {
    let (lambda, nu) = multipliers(p, active, &active.lambda);
    let kkt = residuals(p, &u, &lambda, &nu);
    let active_rows = active
        .rows
        .iter()
        .filter_map(|r| match r {
            Row::Ineq(i) => Some(*i),
            Row::Eq { .. } => None,
        })
        .collect();
    QpSolution {
        objective: p.objective(&u),
        u_star: u,
        status,
        kkt,
        iterations,
        lambda,
        nu,
        active: active_rows,
        certificate,
    }
}

/// KKT residuals of `u` with multipliers recovered from the data alone:
/// least squares over the equality rows and the inequality rows within
/// `1e-7·(1 + |b_i|)` of being tight, dropping the most negative inequality
/// multiplier until all are nonnegative.
pub fn check_kkt(p: &QpProblem, u: &DVector<f64>) -> KktResiduals {
    let n = p.n_var();
    let slack = &p.a_ineq * u + &p.b_ineq;
    let mut set: Vec<usize> = (0..p.n_ineq())
        .filter(|&i| slack[i] >= -1e-7 * (1.0 + p.b_ineq[i].abs()))
        .collect();
    let grad = &p.w1 * u + &p.w2;
    loop {
        let k = set.len() + p.n_eq();
        let mut m = DMatrix::zeros(n, k);
        for (c, &i) in set.iter().enumerate() {
            m.set_column(c, &p.a_ineq.row(i).transpose());
        }
        for e in 0..p.n_eq() {
            m.set_column(set.len() + e, &p.a_eq.row(e).transpose());
        }
        let coef = if k == 0 {
            DVector::zeros(0)
        } else {
            m.clone()
                .svd(true, true)
                .solve(&(-&grad), 1e-12)
                .unwrap_or_else(|_| DVector::zeros(k))
        };
        let worst = (0..set.len())
            .filter(|&c| coef[c] < 0.0)
            .min_by(|&a, &b| coef[a].total_cmp(&coef[b]));
        if let Some(c) = worst {
            set.remove(c);
            continue;
        }
        let mut lambda = DVector::zeros(p.n_ineq());
        for (c, &i) in set.iter().enumerate() {
            lambda[i] = coef[c];
        }
        let nu = DVector::from_iterator(p.n_eq(), (0..p.n_eq()).map(|e| coef[set.len() + e]));
        return residuals(p, u, &lambda, &nu);
    }
}
