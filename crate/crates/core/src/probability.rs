//! Per-step stochastic parameters of the traffic model.
//!
//! `p_i` is the fraction of the vehicles available on interior road `i`
//! (current plus arriving) that leaves it during one step. `q_{i,j}` is the
//! share of road `j`'s departures that turn into its out-neighbor `i`; the
//! shares of every non-outlet road sum to one.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::graph::{NoirGraph, RoadClass, RoadId};
use crate::linalg::{self, LinalgError};
use crate::rng::{self, Purpose};

/// Relative residual above which a solve with `I − QP` is rejected.
pub const SOLVE_RESIDUAL_LIMIT: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid flow-probability range [{lo}, {hi}]: need 0 ≤ lo ≤ hi < 1")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("flow probability {value} on road {road} outside [0, 1)")]
    Probability { road: RoadId, value: f64 },
    #[error("routing fractions of road {road} sum to {sum}, expected 1")]
    Routing { road: RoadId, sum: f64 },
    #[error("road {0} has no out-neighbor to route to")]
    DeadEnd(RoadId),
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("I − QP solve failed: {0}")]
    Solve(#[from] LinalgError),
}

/// Closed interval of admissible flow probabilities, inside `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PRange {
    lo: f64,
    hi: f64,
}

impl PRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self, ModelError> {
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(ModelError::InvalidRange { lo, hi });
        }
        Ok(PRange { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

impl Default for PRange {
    fn default() -> Self {
        PRange { lo: 0.05, hi: 0.95 }
    }
}

/// Vehicle counts: interior roads (the state `x`) plus the boundary roads,
/// whose densities never change.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    pub interior: DVector<f64>,
    pub boundary: DVector<f64>,
}

impl TrafficState {
    pub fn new(interior: DVector<f64>, n_boundary: usize) -> Self {
        TrafficState {
            interior,
            boundary: DVector::zeros(n_boundary),
        }
    }

    pub fn zeros(g: &NoirGraph) -> Self {
        Self::new(DVector::zeros(g.n_interior()), g.n_boundary())
    }

    pub fn total(&self) -> f64 {
        self.interior.sum()
    }
}

#[derive(Debug, Clone)]
pub struct ProbabilityModel {
    n_out_end: usize,
    p: DVector<f64>,
    /// Per road (by slot), the fractions aligned with that road's out-neighbors.
    routing: Vec<Vec<(RoadId, f64)>>,
    q: DMatrix<f64>,
    qp: DMatrix<f64>,
}

impl PartialEq for ProbabilityModel {
    fn eq(&self, other: &Self) -> bool {
        self.n_out_end == other.n_out_end && self.p == other.p && self.routing == other.routing
    }
}

impl ProbabilityModel {
    /// Builds a model from explicit values. `p` is in state order (interior
    /// roads); `fractions[k]` lists the shares of road `k+1` aligned with its
    /// sorted out-neighbors and is ignored for outlets.
    pub fn from_parts(
        g: &NoirGraph,
        p: Vec<f64>,
        fractions: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        let n = g.n_interior();
        if p.len() != n {
            return Err(ModelError::Dimension {
                expected: n,
                got: p.len(),
            });
        }
        if fractions.len() != g.n_total() {
            return Err(ModelError::Dimension {
                expected: g.n_total(),
                got: fractions.len(),
            });
        }
        for (k, &v) in p.iter().enumerate() {
            if !(0.0..1.0).contains(&v) {
                return Err(ModelError::Probability {
                    road: g.interior_road(k),
                    value: v,
                });
            }
        }
        let mut routing = Vec::with_capacity(g.n_total());
        for (road, shares) in g.roads().zip(fractions) {
            if g.class(road) == RoadClass::Outlet {
                routing.push(Vec::new());
                continue;
            }
            let outs = g.outs(road);
            if outs.is_empty() {
                return Err(ModelError::DeadEnd(road));
            }
            if shares.len() != outs.len() {
                return Err(ModelError::Dimension {
                    expected: outs.len(),
                    got: shares.len(),
                });
            }
            let sum: f64 = shares.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || shares.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(ModelError::Routing { road, sum });
            }
            routing.push(outs.iter().copied().zip(shares).collect());
        }
        Ok(Self::assemble(g, DVector::from_vec(p), routing))
    }

    /// Even split over out-neighbors; handy for tests and examples.
    pub fn with_even_routing(g: &NoirGraph, p: Vec<f64>) -> Result<Self, ModelError> {
        let fractions = g
            .roads()
            .map(|r| {
                let k = g.outs(r).len();
                vec![1.0 / k as f64; k]
            })
            .collect();
        Self::from_parts(g, p, fractions)
    }

    fn assemble(g: &NoirGraph, p: DVector<f64>, routing: Vec<Vec<(RoadId, f64)>>) -> Self {
        let n = g.n_interior();
        let mut q = DMatrix::zeros(n, n);
        for j in g.interior() {
            let col = g.state_index(j).expect("interior");
            for &(i, share) in &routing[j.get() - 1] {
                if let Some(row) = g.state_index(i) {
                    q[(row, col)] = share;
                }
            }
        }
        let mut qp = q.clone();
        for (c, &pc) in p.iter().enumerate() {
            qp.column_mut(c).scale_mut(pc);
        }
        ProbabilityModel {
            n_out_end: g.n_out_end(),
            p,
            routing,
            q,
            qp,
        }
    }

    /// Flow probabilities of the interior roads in state order.
    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }

    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.p)
    }

    /// Interior routing block, `Q[r][c] = q_{r+N_out+1, c+N_out+1}` (zero-based).
    pub fn q_matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn qp(&self) -> &DMatrix<f64> {
        &self.qp
    }

    pub fn n_interior(&self) -> usize {
        self.p.len()
    }

    /// `q_{i,j}`: share of road `j`'s departures entering road `i`.
    pub fn q(&self, i: RoadId, j: RoadId) -> f64 {
        self.routing
            .get(j.get() - 1)
            .and_then(|shares| shares.iter().find(|(r, _)| *r == i))
            .map_or(0.0, |&(_, s)| s)
    }

    pub fn fractions(&self, j: RoadId) -> &[(RoadId, f64)] {
        &self.routing[j.get() - 1]
    }

    /// Flow probability of an interior road.
    pub fn p_of(&self, i: RoadId) -> Option<f64> {
        i.get()
            .checked_sub(self.n_out_end + 1)
            .and_then(|k| self.p.get(k).copied())
    }

    /// `I − QP`.
    pub fn transfer(&self) -> DMatrix<f64> {
        let n = self.n_interior();
        DMatrix::identity(n, n) - &self.qp
    }
}

/// Draws `p` uniformly from `p_range` and every non-outlet road's routing
/// shares uniformly from the simplex over its out-neighbors. Each road draws
/// from its own keyed stream, so results depend only on `(seed, step)`.
pub fn sample(
    g: &NoirGraph,
    seed: u64,
    step: u64,
    p_range: PRange,
) -> Result<ProbabilityModel, ModelError> {
    let p = g
        .interior()
        .map(|r| {
            if p_range.hi > p_range.lo {
                rng::keyed(seed, step, r.get() as u64, Purpose::FlowProbability)
                    .random_range(p_range.lo..=p_range.hi)
            } else {
                p_range.lo
            }
        })
        .collect::<Vec<_>>();
    let mut routing = Vec::with_capacity(g.n_total());
    for road in g.roads() {
        if g.class(road) == RoadClass::Outlet {
            routing.push(Vec::new());
            continue;
        }
        let outs = g.outs(road);
        match outs.len() {
            0 => return Err(ModelError::DeadEnd(road)),
            1 => routing.push(vec![(outs[0], 1.0)]),
            k => {
                let mut rng = rng::keyed(seed, step, road.get() as u64, Purpose::Routing);
                let w: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let total: f64 = w.iter().sum();
                routing.push(outs.iter().copied().zip(w.iter().map(|v| v / total)).collect());
            }
        }
    }
    Ok(ProbabilityModel::assemble(g, DVector::from_vec(p), routing))
}

/// Network inflow `y`, the fixed point of `y = QP(x + y)`, via an LU solve
/// of `(I − QP) y = QP x`.
pub fn compute_inflow(m: &ProbabilityModel, x: &TrafficState) -> Result<DVector<f64>, ModelError> {
    check_len(m, &x.interior)?;
    let rhs = &m.qp * &x.interior;
    let y = linalg::guarded_solve_vec(&m.transfer(), &rhs, SOLVE_RESIDUAL_LIMIT)?;
    // (I − QP)^-1 is entrywise nonnegative; clip roundoff below zero.
    Ok(y.map(|v| v.max(0.0)))
}

/// Network outflow `z = P(x + y)`.
pub fn compute_outflow(m: &ProbabilityModel, x: &TrafficState) -> Result<DVector<f64>, ModelError> {
    let y = compute_inflow(m, x)?;
    Ok((&x.interior + y).component_mul(&m.p))
}

fn check_len(m: &ProbabilityModel, x: &DVector<f64>) -> Result<(), ModelError> {
    if x.len() != m.n_interior() {
        return Err(ModelError::Dimension {
            expected: m.n_interior(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Partial Neumann sum `Σ_{h=0}^{terms} M^h`. Only meaningful as an
/// approximation of `(I − M)^-1` when the spectral radius of `M` is below one.
pub fn neumann_partial_inverse(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut power = DMatrix::identity(n, n);
    for _ in 0..terms {
        power = &power * m;
        sum += &power;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_grid, load_noir};
    use crate::linalg::spectral_radius;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn chain2() -> NoirGraph {
        // inlet 1 -> 3 -> 4 -> outlet 2
        load_noir(
            "noir 1 2 4\nroad 3 90 2\nroad 4 90 2\nedge 1 3\nedge 3 4\nedge 4 2\n",
            4.5,
        )
        .unwrap()
    }

    fn state(v: &[f64], nb: usize) -> TrafficState {
        TrafficState::new(DVector::from_row_slice(v), nb)
    }

    /// Plain fixed-point iteration `y ← QP(x + y)`.
    fn inflow_by_iteration(m: &ProbabilityModel, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(x.len());
        for _ in 0..1_000_000 {
            let next = m.qp() * (x + &y);
            let delta = (&next - &y).amax();
            y = next;
            if delta < 1e-12 {
                break;
            }
        }
        y
    }

    #[test]
    fn p_range_validation() {
        assert!(PRange::new(0.0, 0.99).is_ok());
        assert!(PRange::new(0.5, 0.4).is_err());
        assert!(PRange::new(0.1, 1.0).is_err());
        assert!(PRange::new(-0.1, 0.5).is_err());
    }

    #[test]
    fn single_out_neighbor_gets_everything() {
        let g = chain2();
        let m = sample(&g, 1, 0, PRange::default()).unwrap();
        assert_eq!(m.q(RoadId::new(3), RoadId::new(1)), 1.0);
        assert_eq!(m.q(RoadId::new(4), RoadId::new(3)), 1.0);
        assert_eq!(m.q(RoadId::new(2), RoadId::new(4)), 1.0);
        // road 4 routes only to the outlet: interior column is empty
        assert_eq!(m.q_matrix().column(1).sum(), 0.0);
    }

    #[test]
    fn sampling_is_keyed() {
        let g = generate_grid(3, 3, 2, 2, 5).unwrap();
        let a = sample(&g, 42, 3, PRange::default()).unwrap();
        let b = sample(&g, 42, 3, PRange::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.qp(), b.qp());
        let c = sample(&g, 42, 4, PRange::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_model_invariants() {
        let g = generate_grid(4, 4, 3, 3, 9).unwrap();
        let range = PRange::new(0.2, 0.6).unwrap();
        for step in 0..5 {
            let m = sample(&g, 7, step, range).unwrap();
            assert!(m.p().iter().all(|&p| (0.2..=0.6).contains(&p)));
            for j in g.roads().filter(|&r| g.class(r) != RoadClass::Outlet) {
                let sum: f64 = m.fractions(j).iter().map(|(_, s)| s).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            }
            for j in g.interior() {
                let c = g.state_index(j).unwrap();
                let col: f64 = m.q_matrix().column(c).sum();
                let to_outlet = g.outs(j).iter().any(|&o| g.class(o) == RoadClass::Outlet);
                assert!(col <= 1.0 + 1e-12);
                if to_outlet {
                    assert!(col < 1.0);
                } else {
                    assert_abs_diff_eq!(col, 1.0, epsilon = 1e-12);
                }
            }
            assert!(m.qp().iter().all(|&v| v >= 0.0));
            assert!(spectral_radius(m.qp()).unwrap() < 1.0);
        }
    }

    #[test]
    fn inflow_outflow_trivial_cases() {
        let g = chain2();
        let zero = ProbabilityModel::with_even_routing(&g, vec![0.0, 0.0]).unwrap();
        let x = state(&[10.0, 4.0], 2);
        assert_eq!(compute_inflow(&zero, &x).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(compute_outflow(&zero, &x).unwrap().as_slice(), &[0.0, 0.0]);

        let single = load_noir("noir 1 2 3\nroad 3 50 1\nedge 1 3\nedge 3 2\n", 4.5).unwrap();
        let m = ProbabilityModel::with_even_routing(&single, vec![0.3]).unwrap();
        let x = state(&[10.0], 2);
        assert_eq!(compute_inflow(&m, &x).unwrap()[0], 0.0);
        assert_abs_diff_eq!(compute_outflow(&m, &x).unwrap()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn two_road_chain_matches_fixed_point_oracle() {
        let g = chain2();
        let m = ProbabilityModel::with_even_routing(&g, vec![0.5, 0.5]).unwrap();
        let x = state(&[10.0, 0.0], 2);
        let oracle = inflow_by_iteration(&m, &x.interior);
        // frozen from the iteration: y = (0, 5), z = (5, 2.5)
        assert_abs_diff_eq!(oracle[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle[1], 5.0, epsilon = 1e-12);
        let y = compute_inflow(&m, &x).unwrap();
        assert_abs_diff_eq!(y[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 5.0, epsilon = 1e-12);
        let z = compute_outflow(&m, &x).unwrap();
        assert_abs_diff_eq!(z[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn neumann_examples() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(neumann_partial_inverse(&z, 5), DMatrix::identity(3, 3));
        let half = DMatrix::from_element(1, 1, 0.5);
        assert_abs_diff_eq!(neumann_partial_inverse(&half, 3)[(0, 0)], 1.875, epsilon = 1e-15);
    }

    #[test]
    fn from_parts_rejects_bad_input() {
        let g = chain2();
        assert!(matches!(
            ProbabilityModel::with_even_routing(&g, vec![1.0, 0.1]),
            Err(ModelError::Probability { .. })
        ));
        assert!(matches!(
            ProbabilityModel::with_even_routing(&g, vec![0.1]),
            Err(ModelError::Dimension { .. })
        ));
        let bad = vec![vec![1.0], vec![], vec![0.5], vec![1.0]];
        assert!(matches!(
            ProbabilityModel::from_parts(&g, vec![0.1, 0.1], bad),
            Err(ModelError::Routing { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn inflow_is_fixed_point_and_nonnegative(
            seed in 0u64..10_000,
            step in 0u64..100,
            xs in proptest::collection::vec(0.0f64..500.0, 24),
        ) {
            let g = generate_grid(3, 3, 2, 2, seed % 7).unwrap();
            let m = sample(&g, seed, step, PRange::default()).unwrap();
            let x = TrafficState::new(DVector::from_iterator(g.n_interior(), xs.iter().cycle().take(g.n_interior()).copied()), g.n_boundary());
            let y = compute_inflow(&m, &x).unwrap();
            let z = compute_outflow(&m, &x).unwrap();
            let residual = (&y - m.qp() * (&x.interior + &y)).amax();
            prop_assert!(residual <= 1e-10 * (1.0 + x.interior.amax()));
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            prop_assert!(z.iter().all(|&v| v >= 0.0));
            for k in 0..z.len() {
                prop_assert!(z[k] <= x.interior[k] + y[k] + 1e-9);
            }
        }
    }
}
