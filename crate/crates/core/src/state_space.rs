//! Reduced linear dynamics `x[k+1] = A x[k] + B s[k]` and the stacked
//! prediction model `X = G x + H U` over a finite horizon.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::{NoirGraph, RoadClass};
use crate::linalg::{self, LinalgError};
use crate::probability::{self, ModelError, ProbabilityModel, TrafficState, SOLVE_RESIDUAL_LIMIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateSpaceError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("system matrix: {0}")]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How inlet columns of `B` are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InletColumns {
    /// `+1` for every interior out-neighbor of the inlet.
    #[default]
    Unit,
    /// The inlet's routing fraction toward each out-neighbor. Compatibility
    /// mode: splits `u` the same way interior departures are split.
    RoutingFractions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl StateSpace {
    pub fn n_state(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_input(&self) -> usize {
        self.b.ncols()
    }

    pub fn spectral_radius(&self) -> Result<f64, LinalgError> {
        linalg::spectral_radius(&self.a)
    }
}

pub fn assemble(g: &NoirGraph, m: &ProbabilityModel) -> Result<StateSpace, StateSpaceError> {
    assemble_with(g, m, InletColumns::Unit)
}

/// `A = (I − P)(I − QP)^-1`, obtained from `(I − QP)ᵀ Aᵀ = I − P`, and the
/// signed incidence matrix `B`.
pub fn assemble_with(
    g: &NoirGraph,
    m: &ProbabilityModel,
    inlet_columns: InletColumns,
) -> Result<StateSpace, StateSpaceError> {
    let n = g.n_interior();
    if m.n_interior() != n {
        return Err(StateSpaceError::Dimension {
            what: "flow probabilities",
            expected: n,
            got: m.n_interior(),
        });
    }
    let i_minus_p = DMatrix::from_diagonal(&m.p().map(|p| 1.0 - p));
    let at = linalg::guarded_solve(&m.transfer().transpose(), &i_minus_p, SOLVE_RESIDUAL_LIMIT)?;
    // A is a product of entrywise-nonnegative factors; clip roundoff below zero.
    let a = at.transpose().map(|v| v.max(0.0));

    let mut b = DMatrix::zeros(n, g.n_boundary());
    for road in g.interior() {
        let row = g.state_index(road).expect("interior");
        for &j in g.ins(road) {
            if g.class(j) == RoadClass::Inlet {
                b[(row, j.get() - 1)] = match inlet_columns {
                    InletColumns::Unit => 1.0,
                    InletColumns::RoutingFractions => m.q(road, j),
                };
            }
        }
        for &j in g.outs(road) {
            if g.class(j) == RoadClass::Outlet {
                b[(row, j.get() - 1)] = -1.0;
            }
        }
    }
    Ok(StateSpace { a, b })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionModel {
    /// Block row `r` (zero-based) is `A^(r+1)`.
    pub g: DMatrix<f64>,
    /// Block `(r, c)` is `A^(r−c) B` for `r ≥ c`, zero above the diagonal.
    pub h: DMatrix<f64>,
    pub horizon: usize,
}

impl PredictionModel {
    pub fn n_state(&self) -> usize {
        self.g.ncols()
    }

    pub fn n_input(&self) -> usize {
        self.h.ncols() / self.horizon
    }

    /// Predicted stacked densities `G x + H U`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.g * x + &self.h * u
    }
}

pub fn build_prediction(ss: &StateSpace, horizon: usize) -> Result<PredictionModel, StateSpaceError> {
    if horizon == 0 {
        return Err(StateSpaceError::Horizon);
    }
    let n = ss.n_state();
    let m = ss.n_input();
    let mut g = DMatrix::zeros(n * horizon, n);
    let mut h = DMatrix::zeros(n * horizon, m * horizon);
    // powers[d] = A^(d+1), ab[d] = A^d B
    let mut power = ss.a.clone();
    let mut ab = Vec::with_capacity(horizon);
    ab.push(ss.b.clone());
    for r in 0..horizon {
        g.view_mut((r * n, 0), (n, n)).copy_from(&power);
        if r + 1 < horizon {
            ab.push(&ss.a * &ab[r]);
            power = &ss.a * &power;
        }
    }
    for r in 0..horizon {
        for c in 0..=r {
            h.view_mut((r * n, c * m), (n, m)).copy_from(&ab[r - c]);
        }
    }
    Ok(PredictionModel { g, h, horizon })
}

fn check_inputs(
    n_state: usize,
    n_input: usize,
    x: &TrafficState,
    s: &DVector<f64>,
) -> Result<(), StateSpaceError> {
    if x.interior.len() != n_state {
        return Err(StateSpaceError::Dimension {
            what: "state",
            expected: n_state,
            got: x.interior.len(),
        });
    }
    if s.len() != n_input {
        return Err(StateSpaceError::Dimension {
            what: "boundary control",
            expected: n_input,
            got: s.len(),
        });
    }
    Ok(())
}

/// `A x + B s`; boundary densities are carried over unchanged.
pub fn propagate(
    ss: &StateSpace,
    x: &TrafficState,
    s: &DVector<f64>,
) -> Result<TrafficState, StateSpaceError> {
    check_inputs(ss.n_state(), ss.n_input(), x, s)?;
    Ok(TrafficState {
        interior: &ss.a * &x.interior + &ss.b * s,
        boundary: x.boundary.clone(),
    })
}

/// Road-by-road update `ρ'_i = (1 − p_i)(ρ_i + Σ_{j ∈ I_i} q_{i,j} z_j)`,
/// where `z_j = u_j` for an inlet `j` and interior `z` comes from
/// [`probability::compute_outflow`]. Outlet releases `v` do not appear.
///
/// Coincides with [`propagate`] when `s = 0`. With inlet inflow it adds
/// `(1 − p_i) q_{i,j} u_j` where `propagate` adds `u_j`.
pub fn elementwise_propagate(
    g: &NoirGraph,
    m: &ProbabilityModel,
    x: &TrafficState,
    s: &DVector<f64>,
) -> Result<TrafficState, StateSpaceError> {
    check_inputs(g.n_interior(), g.n_boundary(), x, s)?;
    let z = probability::compute_outflow(m, x)?;
    let mut next = DVector::zeros(g.n_interior());
    for road in g.interior() {
        let i = g.state_index(road).expect("interior");
        let mut arriving = 0.0;
        for &j in g.ins(road) {
            let zj = match g.state_index(j) {
                Some(k) => z[k],
                None => s[j.get() - 1],
            };
            arriving += m.q(road, j) * zj;
        }
        next[i] = (1.0 - m.p()[i]) * (x.interior[i] + arriving);
    }
    Ok(TrafficState {
        interior: next,
        boundary: x.boundary.clone(),
    })
}
