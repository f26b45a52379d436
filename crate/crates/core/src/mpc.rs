//! Receding-horizon boundary controller.
//!
//! The decision vector stacks the boundary controls of the whole horizon,
//! `U = [s[k]; s[k+1]; …]`, each block ordered inlets then outlets. Predicted
//! interior densities are `X = G x + H U`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::probability::TrafficState;
use crate::qp::{self, InfeasibilityCertificate, QpError, QpOptions, QpProblem, QpSolution, QpStatus};
use crate::state_space::PredictionModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("MPC problem infeasible at d0 = {d0}; binding rows {binding:?}")]
    Infeasible {
        d0: f64,
        certificate: Option<InfeasibilityCertificate>,
        /// Inequality rows carrying weight in the certificate.
        binding: Vec<usize>,
    },
    #[error("QP solver hit its iteration cap ({0} iterations)")]
    MaxIter(usize),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub beta: f64,
    /// Vehicles allowed to cross the boundary per step.
    pub d0: f64,
    pub horizon: usize,
    /// Density cap per interior road.
    pub x_max: DVector<f64>,
    /// Adds the rows `−G x − H U ≤ 0` keeping predicted densities nonnegative.
    pub enforce_nonnegativity: bool,
    /// On infeasibility, retry with `d0` halved, at most
    /// [`MAX_FALLBACK_HALVINGS`] times.
    pub fallback: bool,
    pub qp: QpOptions,
}

pub const DEFAULT_HORIZON: usize = 5;
pub const MAX_FALLBACK_HALVINGS: u32 = 4;

impl MpcConfig {
    pub fn new(beta: f64, d0: f64, horizon: usize, x_max: DVector<f64>) -> Result<Self, MpcError> {
        let cfg = MpcConfig {
            beta,
            d0,
            horizon,
            x_max,
            enforce_nonnegativity: true,
            fallback: false,
            qp: QpOptions::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MpcError::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if !(self.d0 > 0.0 && self.d0.is_finite()) {
            return Err(MpcError::Config(format!("d0 must be > 0, got {}", self.d0)));
        }
        if self.horizon == 0 {
            return Err(MpcError::Config("horizon must be ≥ 1".into()));
        }
        if self.x_max.iter().any(|&v| !(v > 0.0)) {
            return Err(MpcError::Config("x_max must be > 0 on every road".into()));
        }
        Ok(())
    }
}

/// Inflows `u` of the inlets followed by releases `v` of the outlets.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryControl {
    pub s: DVector<f64>,
    pub n_in: usize,
}

impl BoundaryControl {
    pub fn inflows(&self) -> &[f64] {
        &self.s.as_slice()[..self.n_in]
    }

    pub fn outflows(&self) -> &[f64] {
        &self.s.as_slice()[self.n_in..]
    }

    pub fn sum_u(&self) -> f64 {
        self.inflows().iter().sum()
    }

    pub fn sum_v(&self) -> f64 {
        self.outflows().iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.s.sum()
    }
}

/// `W1 = I + β HᵀH`, `W2 = β HᵀG x`. With `β = 0` this is exactly `(I, 0)`.
pub fn build_cost(pm: &PredictionModel, x: &TrafficState, beta: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = pm.h.ncols();
    if beta == 0.0 {
        return (DMatrix::identity(n, n), DVector::zeros(n));
    }
    let hth = pm.h.tr_mul(&pm.h);
    let w1 = DMatrix::identity(n, n) + (&hth + hth.transpose()) * (0.5 * beta);
    let w2 = pm.h.tr_mul(&(&pm.g * &x.interior)) * beta;
    (w1, w2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

/// Row blocks of the inequality system, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowBlock {
    /// `−U ≤ 0`
    NoBackflow,
    /// `H U + G x − x_max ≤ 0`
    Capacity,
    /// `−H U − G x ≤ 0`
    Nonnegative,
}

/// Classifies an inequality row index as `(block, horizon step, entry)`.
pub fn classify_row(pm: &PredictionModel, row: usize) -> (RowBlock, usize, usize) {
    let nu = pm.h.ncols();
    let m = pm.n_input();
    let n = pm.n_state();
    if row < nu {
        return (RowBlock::NoBackflow, row / m, row % m);
    }
    let r = row - nu;
    let nx = n * pm.horizon;
    if r < nx {
        (RowBlock::Capacity, r / n, r % n)
    } else {
        let r = r - nx;
        (RowBlock::Nonnegative, r / n, r % n)
    }
}

pub fn build_constraints(pm: &PredictionModel, x: &TrafficState, cfg: &MpcConfig) -> Constraints {
    build_constraints_with_budget(pm, x, cfg, cfg.d0)
}

fn build_constraints_with_budget(
    pm: &PredictionModel,
    x: &TrafficState,
    cfg: &MpcConfig,
    d0: f64,
) -> Constraints {
    let nu = pm.h.ncols();
    let nx = pm.h.nrows();
    let n = pm.n_state();
    let m = pm.n_input();
    let gx = &pm.g * &x.interior;
    let x_max = DVector::from_fn(nx, |r, _| cfg.x_max[r % n]);

    let rows = nu + nx + if cfg.enforce_nonnegativity { nx } else { 0 };
    let mut a_ineq = DMatrix::zeros(rows, nu);
    let mut b_ineq = DVector::zeros(rows);
    a_ineq.view_mut((0, 0), (nu, nu)).fill_with_identity();
    a_ineq.view_mut((0, 0), (nu, nu)).neg_mut();
    a_ineq.view_mut((nu, 0), (nx, nu)).copy_from(&pm.h);
    b_ineq.rows_mut(nu, nx).copy_from(&(&gx - &x_max));
    if cfg.enforce_nonnegativity {
        a_ineq.view_mut((nu + nx, 0), (nx, nu)).copy_from(&(-&pm.h));
        b_ineq.rows_mut(nu + nx, nx).copy_from(&(-&gx));
    }

    let mut a_eq = DMatrix::zeros(pm.horizon, nu);
    for r in 0..pm.horizon {
        a_eq.view_mut((r, r * m), (1, m)).fill(1.0);
    }
    let b_eq = DVector::from_element(pm.horizon, -d0);
    Constraints {
        a_ineq,
        b_ineq,
        a_eq,
        b_eq,
    }
}

pub fn build_problem(pm: &PredictionModel, x: &TrafficState, cfg: &MpcConfig) -> Result<QpProblem, MpcError> {
    build_problem_with_budget(pm, x, cfg, cfg.d0)
}

fn build_problem_with_budget(
    pm: &PredictionModel,
    x: &TrafficState,
    cfg: &MpcConfig,
    d0: f64,
) -> Result<QpProblem, MpcError> {
    check_dims(pm, x, cfg)?;
    let (w1, w2) = build_cost(pm, x, cfg.beta);
    let c = build_constraints_with_budget(pm, x, cfg, d0);
    Ok(QpProblem::new(w1, w2, c.a_ineq, c.b_ineq, c.a_eq, c.b_eq)?)
}

fn check_dims(pm: &PredictionModel, x: &TrafficState, cfg: &MpcConfig) -> Result<(), MpcError> {
    if pm.horizon != cfg.horizon {
        return Err(MpcError::Config(format!(
            "prediction horizon {} differs from configured {}",
            pm.horizon, cfg.horizon
        )));
    }
    if x.interior.len() != pm.n_state() || cfg.x_max.len() != pm.n_state() {
        return Err(MpcError::Config(format!(
            "state length {} / x_max length {} differ from model size {}",
            x.interior.len(),
            cfg.x_max.len(),
            pm.n_state()
        )));
    }
    Ok(())
}

/// Outcome of one controller step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub control: BoundaryControl,
    /// Predicted stacked densities `G x + H U*`.
    pub predicted: DVector<f64>,
    pub solution: QpSolution,
    /// Coordination cost `½‖U*‖² + (β/2)‖G x + H U*‖²`: the QP objective plus
    /// its dropped constant `(β/2)‖G x‖²`.
    pub cost: f64,
    /// Budget actually enforced; below `cfg.d0` only after fallback.
    pub d0_used: f64,
    pub halvings: u32,
}

/// Solves the horizon QP and applies its first block. `warm_active` is an
/// optional active-set hint, typically the previous step's.
pub fn step(
    pm: &PredictionModel,
    x: &TrafficState,
    n_in: usize,
    cfg: &MpcConfig,
    warm_active: &[usize],
) -> Result<MpcStep, MpcError> {
    cfg.validate()?;
    let mut d0 = cfg.d0;
    let mut halvings = 0;
    loop {
        let problem = build_problem_with_budget(pm, x, cfg, d0)?;
        let sol = qp::solve_warm(&problem, &cfg.qp, warm_active)?;
        match sol.status {
            QpStatus::Optimal => {
                let m = pm.n_input();
                // roundoff below the KKT tolerance would otherwise read as back-flow
                let s = sol
                    .u_star
                    .rows(0, m)
                    .map(|e| if e < 0.0 && e >= -cfg.qp.kkt_tol { 0.0 } else { e });
                let predicted = pm.predict(&x.interior, &sol.u_star);
                let free = &pm.g * &x.interior;
                let cost = sol.objective + 0.5 * cfg.beta * free.norm_squared();
                return Ok(MpcStep {
                    control: BoundaryControl { s, n_in },
                    predicted,
                    cost,
                    solution: sol,
                    d0_used: d0,
                    halvings,
                });
            }
            QpStatus::MaxIter => return Err(MpcError::MaxIter(sol.iterations)),
            QpStatus::Infeasible => {
                if cfg.fallback && halvings < MAX_FALLBACK_HALVINGS {
                    d0 *= 0.5;
                    halvings += 1;
                    continue;
                }
                let binding = sol.certificate.as_ref().map(|c| c.support.clone()).unwrap_or_default();
                return Err(MpcError::Infeasible {
                    d0,
                    certificate: sol.certificate,
                    binding,
                });
            }
        }
    }
}

/// Coordination cost `½ Σ_j (‖s[j]‖² + β ‖ρ[j+1]‖²)` of a stacked control
/// sequence, evaluated along the predicted trajectory.
pub fn coordination_cost(pm: &PredictionModel, x: &TrafficState, u: &DVector<f64>, beta: f64) -> f64 {
    let rho = pm.predict(&x.interior, u);
    0.5 * (u.norm_squared() + beta * rho.norm_squared())
}
