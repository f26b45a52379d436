//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use noir_core::qp::QpProblem;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random strictly convex QP in `n ≤ 3` variables with the box `|u_i| ≤ 1`,
/// `extra` random inequalities and optionally one equality, all satisfied
/// with slack ≥ 0.05 by an interior point inside `[-0.5, 0.5]ⁿ`.
pub fn random_small_qp(rng: &mut ChaCha8Rng, n: usize, extra: usize, with_eq: bool) -> QpProblem {
    assert!((1..=3).contains(&n));
    // W1 = Rᵀ diag(λ) R with λ ∈ [0.5, 3] keeps the grid oracle well conditioned
    let mut m = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m += DMatrix::identity(n, n) * 2.0;
    let q = m.qr().q();
    let lam = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.5..3.0)));
    let mut w1 = q.transpose() * lam * &q;
    w1 = (&w1 + w1.transpose()) * 0.5;
    let w2 = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));

    let interior = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        rows.push((e.clone(), -1.0));
        rows.push((-e, -1.0));
    }
    for _ in 0..extra {
        let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let slack = rng.random_range(0.05..0.6);
        rows.push((a.clone(), -(a.dot(&interior) + slack)));
    }
    let a_ineq = DMatrix::from_fn(rows.len(), n, |r, c| rows[r].0[c]);
    let b_ineq = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let (a_eq, b_eq) = if with_eq {
        let mut a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        // the last coefficient is what the oracle divides by
        a[n - 1] = rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        (DMatrix::from_row_slice(1, n, a.as_slice()), DVector::from_element(1, -a.dot(&interior)))
    } else {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    };
    QpProblem::new(w1, w2, a_ineq, b_ineq, a_eq, b_eq).unwrap()
}

/// Minimizes over a grid of step `h` on the first `n − 1` coordinates of the
/// box `[-1, 1]ⁿ`. The last coordinate is fixed by the equality when there
/// is one and is otherwise minimized exactly over its feasible interval.
pub fn grid_search_qp(p: &QpProblem, h: f64) -> Option<(DVector<f64>, f64)> {
    let n = p.n_var();
    let cells = (2.0 / h).round() as usize;
    let coord = |i: usize| -1.0 + i as f64 * h;
    let last = n - 1;
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut u = DVector::zeros(n);
    let total = (cells + 1).pow(last as u32);
    for flat in 0..total {
        let mut rem = flat;
        for c in 0..last {
            u[c] = coord(rem % (cells + 1));
            rem /= cells + 1;
        }
        let t = if p.n_eq() > 0 {
            let a = p.a_eq.row(0);
            let partial: f64 = (0..last).map(|c| a[c] * u[c]).sum();
            Some(-(p.b_eq[0] + partial) / a[last])
        } else {
            // interval for the last coordinate from every inequality row
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut ok = true;
            for r in 0..p.n_ineq() {
                let a = p.a_ineq.row(r);
                let rest: f64 = p.b_ineq[r] + (0..last).map(|c| a[c] * u[c]).sum::<f64>();
                let al = a[last];
                if al.abs() < 1e-14 {
                    ok &= rest <= 0.0;
                } else if al > 0.0 {
                    hi = hi.min(-rest / al);
                } else {
                    lo = lo.max(-rest / al);
                }
            }
            if !ok || lo > hi {
                None
            } else {
                let w = &p.w1;
                let lin: f64 = p.w2[last] + (0..last).map(|c| w[(last, c)] * u[c]).sum::<f64>();
                Some((-lin / w[(last, last)]).clamp(lo, hi))
            }
        };
        let Some(t) = t else { continue };
        u[last] = t;
        let feasible = (0..p.n_ineq()).all(|r| p.a_ineq.row(r).dot(&u.transpose()) + p.b_ineq[r] <= 1e-12);
        if !feasible {
            continue;
        }
        let f = p.objective(&u);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((u.clone(), f));
        }
    }
    best
}

/// Equality-only minimizer from the KKT system `[W Aᵀ; A 0]`.
pub fn kkt_equality_solution(p: &QpProblem) -> DVector<f64> {
    let (n, m) = (p.n_var(), p.n_eq());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&p.w1);
    k.view_mut((0, n), (n, m)).copy_from(&p.a_eq.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(&p.a_eq);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&p.w2));
    rhs.rows_mut(n, m).copy_from(&(-&p.b_eq));
    k.lu().solve(&rhs).expect("nonsingular KKT").rows(0, n).into_owned()
}

/// Upper bound on the spectral radius: `min_j ‖M^(2^j)‖₁^(1/2^j)`.
pub fn gelfand_bound(m: &DMatrix<f64>, squarings: u32) -> f64 {
    let norm1 = |a: &DMatrix<f64>| {
        (0..a.ncols())
            .map(|c| a.column(c).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut power = m.clone();
    let mut best = norm1(&power);
    for j in 1..=squarings {
        power = &power * &power;
        best = best.min(norm1(&power).powf(1.0 / 2f64.powi(j as i32)));
    }
    best
}
