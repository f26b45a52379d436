//! Closed-loop simulation: sample the step's probabilities, assemble the
//! dynamics, solve the controller, propagate, repeat.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use thiserror::Error;

use crate::graph::{NoirGraph, RoadClass};
use crate::linalg::{self, LinalgError};
use crate::mpc::{self, BoundaryControl, MpcConfig, MpcError, DEFAULT_HORIZON};
use crate::probability::{self, ModelError, PRange, ProbabilityModel, TrafficState};
use crate::qp::{QpOptions, QpStatus};
use crate::rng::{self, Purpose};
use crate::state_space::{self, InletColumns, StateSpaceError};

/// Largest excursion outside `[0, x_max]` attributed to roundoff and clamped.
pub const CLAMP_LIMIT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation configuration: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    Step { step: usize, source: StepError },
    #[error("step {step}: invariant breach: {message}")]
    Invariant { step: usize, message: String },
    #[error("debug dump failed: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub fn step(&self) -> Option<usize> {
        match self {
            SimError::Step { step, .. } | SimError::Invariant { step, .. } => Some(*step),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error("spectral radius: {0}")]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

/// Initial densities drawn per road, uniform in
/// `[lo·rho_max, hi·rho_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialDensity {
    pub lo: f64,
    pub hi: f64,
}

impl Default for InitialDensity {
    fn default() -> Self {
        InitialDensity { lo: 0.0, hi: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSettings {
    pub beta: f64,
    pub d0: f64,
    pub horizon: usize,
    pub enforce_nonnegativity: bool,
    pub fallback: bool,
    pub warm_start: bool,
    pub qp: QpOptions,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        ControllerSettings {
            beta: 0.0,
            d0: 400.0,
            horizon: DEFAULT_HORIZON,
            enforce_nonnegativity: true,
            fallback: false,
            warm_start: true,
            qp: QpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub seed: u64,
    pub steps: usize,
    pub controller: ControllerSettings,
    pub p_range: PRange,
    pub initial: InitialDensity,
    pub inlet_columns: InletColumns,
    /// Keep every step's probability model for auditing.
    pub retain_models: bool,
    /// Write per-step P, Q, A, B, G, H and QP data as CSV below this directory.
    pub debug_dump: Option<PathBuf>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            seed: 0,
            steps: 300,
            controller: ControllerSettings::default(),
            p_range: PRange::default(),
            initial: InitialDensity::default(),
            inlet_columns: InletColumns::Unit,
            retain_models: true,
            debug_dump: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.steps == 0 {
            return Err(SimError::Config("steps must be ≥ 1".into()));
        }
        let InitialDensity { lo, hi } = self.initial;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(SimError::Config(format!(
                "initial density fractions [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 1"
            )));
        }
        Ok(())
    }
}

/// Per-step diagnostics; step `k` (one-based) moves `x[k−1]` to `x[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub sum_u: f64,
    pub sum_v: f64,
    /// Coordination cost of the optimal horizon plan.
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_max: f64,
    pub spectral_radius: f64,
    pub d0_used: f64,
    pub halvings: u32,
    /// `‖B s‖∞`, the stimulus entering the state this step.
    pub stimulus: f64,
    /// Largest roundoff excursion clamped back into `[0, x_max]`.
    pub clamped: f64,
    /// Largest violation of the controller's predicted bounds.
    pub predicted_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub seed: u64,
    pub config: SimulationConfig,
    pub n_in: usize,
    pub n_out_end: usize,
    pub x_max: DVector<f64>,
    /// `x[0] … x[K]`.
    pub states: Vec<DVector<f64>>,
    /// `s[1] … s[K]`.
    pub controls: Vec<BoundaryControl>,
    pub steps: Vec<StepRecord>,
    pub models: Option<Vec<ProbabilityModel>>,
    pub wall_time_s: f64,
}

impl SimulationTrace {
    pub fn sum_u(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.sum_u).collect()
    }

    pub fn sum_v(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.sum_v).collect()
    }

    pub fn max_spectral_radius(&self) -> f64 {
        self.steps.iter().map(|s| s.spectral_radius).fold(0.0, f64::max)
    }
}

pub fn initial_state(g: &NoirGraph, seed: u64, init: InitialDensity) -> TrafficState {
    let x = g
        .interior()
        .map(|r| {
            let cap = g.rho_max(r);
            let f = if init.hi > init.lo {
                rng::keyed(seed, 0, r.get() as u64, Purpose::InitialDensity).random_range(init.lo..=init.hi)
            } else {
                init.lo
            };
            f * cap
        })
        .collect::<Vec<_>>();
    TrafficState::new(DVector::from_vec(x), g.n_boundary())
}

pub fn run(g: &NoirGraph, cfg: &SimulationConfig) -> Result<SimulationTrace, SimError> {
    run_from(g, cfg, initial_state(g, cfg.seed, cfg.initial))
}

/// Runs from an explicit initial state.
pub fn run_from(
    g: &NoirGraph,
    cfg: &SimulationConfig,
    x0: TrafficState,
) -> Result<SimulationTrace, SimError> {
    cfg.validate()?;
    let started = Instant::now();
    let x_max = DVector::from_vec(g.interior_capacity());
    let c = &cfg.controller;
    let mpc_cfg = MpcConfig {
        beta: c.beta,
        d0: c.d0,
        horizon: c.horizon,
        x_max: x_max.clone(),
        enforce_nonnegativity: c.enforce_nonnegativity,
        fallback: c.fallback,
        qp: c.qp,
    };
    mpc_cfg
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    if x0.interior.len() != g.n_interior() {
        return Err(SimError::Config(format!(
            "initial state has {} entries, network has {} interior roads",
            x0.interior.len(),
            g.n_interior()
        )));
    }

    let mut x = x0;
    let mut states = vec![x.interior.clone()];
    let mut controls = Vec::with_capacity(cfg.steps);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut models = cfg.retain_models.then(Vec::new);
    let mut warm: Vec<usize> = Vec::new();

    for k in 1..=cfg.steps {
        let err = |e: StepError| SimError::Step { step: k, source: e };
        let model = probability::sample(g, cfg.seed, (k - 1) as u64, cfg.p_range)
            .map_err(|e| err(e.into()))?;
        let ss = state_space::assemble_with(g, &model, cfg.inlet_columns).map_err(|e| err(e.into()))?;
        let radius = ss.spectral_radius().map_err(|e| err(e.into()))?;
        let pm = state_space::build_prediction(&ss, c.horizon).map_err(|e| err(e.into()))?;
        let out = mpc::step(&pm, &x, g.n_in(), &mpc_cfg, &warm).map_err(|e| err(e.into()))?;
        if let Some(dir) = &cfg.debug_dump {
            dump_step(&dir.join(format!("step_{k:04}")), &model, &ss, &pm, &x, &mpc_cfg)?;
        }

        let mut next = state_space::propagate(&ss, &x, &out.control.s).map_err(|e| err(e.into()))?;
        let mut clamped = 0.0f64;
        for (i, v) in next.interior.iter_mut().enumerate() {
            let cap = x_max[i];
            let excursion = if *v < 0.0 {
                -*v
            } else if *v > cap {
                *v - cap
            } else {
                0.0
            };
            if excursion > CLAMP_LIMIT {
                return Err(SimError::Invariant {
                    step: k,
                    message: format!(
                        "density {v} on road {} outside [0, {cap}]",
                        g.interior_road(i)
                    ),
                });
            }
            clamped = clamped.max(excursion);
            *v = v.clamp(0.0, cap);
        }

        let n = g.n_interior();
        let predicted_violation = out
            .predicted
            .iter()
            .enumerate()
            .map(|(r, &v)| (-v).max(v - x_max[r % n]).max(0.0))
            .fold(0.0, f64::max);
        let stimulus = (&ss.b * &out.control.s).amax();
        steps.push(StepRecord {
            k,
            sum_u: out.control.sum_u(),
            sum_v: out.control.sum_v(),
            objective: out.cost,
            status: out.solution.status,
            iterations: out.solution.iterations,
            kkt_max: out.solution.kkt.max(),
            spectral_radius: radius,
            d0_used: out.d0_used,
            halvings: out.halvings,
            stimulus,
            clamped,
            predicted_violation,
        });
        if c.warm_start {
            warm = out.solution.active.clone();
        }
        controls.push(out.control);
        if let Some(ms) = models.as_mut() {
            ms.push(model);
        }
        states.push(next.interior.clone());
        x = next;
    }

    Ok(SimulationTrace {
        seed: cfg.seed,
        config: cfg.clone(),
        n_in: g.n_in(),
        n_out_end: g.n_out_end(),
        x_max,
        states,
        controls,
        steps,
        models,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn dump_step(
    dir: &std::path::Path,
    model: &ProbabilityModel,
    ss: &state_space::StateSpace,
    pm: &state_space::PredictionModel,
    x: &TrafficState,
    cfg: &MpcConfig,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let write = |name: &str, m: &nalgebra::DMatrix<f64>| -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
        linalg::write_triples(f, m)
    };
    write("P.csv", &model.p_matrix())?;
    write("Q.csv", model.q_matrix())?;
    write("A.csv", &ss.a)?;
    write("B.csv", &ss.b)?;
    write("G.csv", &pm.g)?;
    write("H.csv", &pm.h)?;
    if let Ok(problem) = mpc::build_problem(pm, x, cfg) {
        problem.write_csv(&dir.join("qp"))?;
    }
    Ok(())
}

/// First one-based step `k` such that, over the `window` steps starting at
/// `k`, the spread (max − min) of both `Σu` and `Σv` is at most `tol` times
/// the respective window mean. `None` if no such window exists.
pub fn detect_steady_state(sum_u: &[f64], sum_v: &[f64], window: usize, tol: f64) -> Option<usize> {
    let len = sum_u.len().min(sum_v.len());
    if window == 0 || window > len {
        return None;
    }
    let settled = |xs: &[f64]| {
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        hi - lo <= tol * mean.abs()
    };
    (0..=len - window)
        .find(|&k| settled(&sum_u[k..k + window]) && settled(&sum_v[k..k + window]))
        .map(|k| k + 1)
}

/// Per-step mass balance.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub k: usize,
    pub total_before: f64,
    pub total_after: f64,
    /// `1ᵀ B s`: admitted minus released vehicles.
    pub boundary_net: f64,
    /// Vehicles routed from interior roads into outlets.
    pub routing_leak: f64,
    /// `Σx[k] − Σx[k−1] − boundary_net + routing_leak`.
    pub imbalance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservationReport {
    pub rows: Vec<AuditRow>,
    pub tol: f64,
    /// Steps whose `|imbalance|` exceeds `tol`.
    pub flagged: Vec<usize>,
}

impl ConservationReport {
    pub fn max_imbalance(&self) -> f64 {
        self.rows.iter().map(|r| r.imbalance.abs()).fold(0.0, f64::max)
    }
}

/// Rebuilds each step's expected change in total density from the routing
/// fractions and the boundary incidence alone, and compares it with the
/// recorded states. Requires retained models.
pub fn conservation_audit(
    trace: &SimulationTrace,
    g: &NoirGraph,
    models: &[ProbabilityModel],
    tol: f64,
) -> Result<ConservationReport, ModelError> {
    let mut rows = Vec::with_capacity(trace.controls.len());
    let mut flagged = Vec::new();
    for (idx, (control, model)) in trace.controls.iter().zip(models).enumerate() {
        let k = idx + 1;
        let before = &trace.states[idx];
        let after = &trace.states[idx + 1];
        let mut boundary_net = 0.0;
        for j in g.boundary() {
            let sj = control.s[j.get() - 1];
            let fanout = match g.class(j) {
                RoadClass::Inlet => g.outs(j).iter().filter(|r| g.state_index(**r).is_some()).count() as f64,
                _ => -(g.ins(j).iter().filter(|r| g.state_index(**r).is_some()).count() as f64),
            };
            let weight = match (g.class(j), trace.config.inlet_columns) {
                (RoadClass::Inlet, InletColumns::RoutingFractions) => g
                    .outs(j)
                    .iter()
                    .filter(|r| g.state_index(**r).is_some())
                    .map(|&r| model.q(r, j))
                    .sum(),
                _ => fanout,
            };
            boundary_net += weight * sj;
        }
        let state = TrafficState::new(before.clone(), g.n_boundary());
        let z = probability::compute_outflow(model, &state)?;
        let routing_leak: f64 = g
            .interior()
            .map(|j| {
                let to_outlets: f64 = model
                    .fractions(j)
                    .iter()
                    .filter(|(r, _)| g.class(*r) == RoadClass::Outlet)
                    .map(|(_, q)| q)
                    .sum();
                to_outlets * z[g.state_index(j).expect("interior")]
            })
            .sum();
        let total_before = before.sum();
        let total_after = after.sum();
        let imbalance = total_after - total_before - boundary_net + routing_leak;
        if imbalance.abs() > tol {
            flagged.push(k);
        }
        rows.push(AuditRow {
            k,
            total_before,
            total_after,
            boundary_net,
            routing_leak,
            imbalance,
        });
    }
    Ok(ConservationReport { rows, tol, flagged })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiboReport {
    pub max_norm_sq: f64,
    pub bound: f64,
    pub r_a: f64,
    pub z_max: f64,
    pub holds: bool,
}

/// Checks `max_k ‖x[k]‖² ≤ z_max² n / (1 − r_a)`, with `r_a` the largest
/// observed spectral radius of `A` and `z_max` the larger of the initial
/// densities and the per-step stimuli `‖B s‖∞`.
pub fn bibo_check(trace: &SimulationTrace) -> BiboReport {
    let n = trace.x_max.len() as f64;
    let r_a = trace.max_spectral_radius();
    let x0_max = trace.states[0].amax();
    let z_max = trace.steps.iter().map(|s| s.stimulus).fold(x0_max, f64::max);
    let max_norm_sq = trace
        .states
        .iter()
        .map(|x| x.norm_squared())
        .fold(0.0, f64::max);
    let bound = if r_a < 1.0 {
        z_max * z_max * n / (1.0 - r_a)
    } else {
        f64::INFINITY
    };
    BiboReport {
        max_norm_sq,
        bound,
        r_a,
        z_max,
        holds: r_a < 1.0 && max_norm_sq <= bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_noir;
    use approx::assert_abs_diff_eq;

    const FOUR_ROAD: &str = "noir 1 2 4\nroad 3 900 5\nroad 4 900 5\nedge 1 3\nedge 3 4\nedge 4 2\n";

    fn small_cfg(steps: usize) -> SimulationConfig {
        SimulationConfig {
            seed: 3,
            steps,
            controller: ControllerSettings {
                d0: 40.0,
                ..ControllerSettings::default()
            },
            p_range: PRange::new(0.2, 0.5).unwrap(),
            initial: InitialDensity { lo: 0.2, hi: 0.4 },
            ..SimulationConfig::default()
        }
    }

    #[test]
    fn one_step_on_four_roads() {
        let g = load_noir(FOUR_ROAD, 4.5).unwrap();
        let t = run(&g, &small_cfg(1)).unwrap();
        assert_eq!(t.states.len(), 2);
        assert_eq!(t.controls.len(), 1);
        assert_abs_diff_eq!(t.controls[0].total(), 40.0, epsilon = 1e-8);
    }

    #[test]
    fn runs_are_reproducible() {
        let g = load_noir(FOUR_ROAD, 4.5).unwrap();
        let a = run(&g, &small_cfg(20)).unwrap();
        let b = run(&g, &small_cfg(20)).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn steady_state_detection() {
        let flat = vec![100.0; 80];
        assert_eq!(detect_steady_state(&flat, &flat, 50, 0.1), Some(1));
        let wave: Vec<f64> = (0..80).map(|k| if k % 2 == 0 { 80.0 } else { 120.0 }).collect();
        assert_eq!(detect_steady_state(&wave, &flat, 50, 0.1), None);
        let mut settle = vec![0.0; 10];
        settle.extend(vec![200.0; 60]);
        assert_eq!(detect_steady_state(&settle, &settle, 50, 0.1), Some(11));
        assert_eq!(detect_steady_state(&flat, &flat, 81, 0.1), None);
    }

    #[test]
    fn audit_balances_on_small_run() {
        let g = load_noir(FOUR_ROAD, 4.5).unwrap();
        let t = run(&g, &small_cfg(15)).unwrap();
        let rep = conservation_audit(&t, &g, t.models.as_ref().unwrap(), 1e-8).unwrap();
        assert!(rep.flagged.is_empty(), "{:?}", rep.rows);
        let bibo = bibo_check(&t);
        assert!(bibo.holds);
    }

    #[test]
    fn rejects_bad_config() {
        let g = load_noir(FOUR_ROAD, 4.5).unwrap();
        let mut cfg = small_cfg(0);
        assert!(matches!(run(&g, &cfg), Err(SimError::Config(_))));
        cfg.steps = 1;
        cfg.initial = InitialDensity { lo: 0.6, hi: 0.5 };
        assert!(matches!(run(&g, &cfg), Err(SimError::Config(_))));
        cfg.initial = InitialDensity::default();
        cfg.controller.d0 = -1.0;
        assert!(matches!(run(&g, &cfg), Err(SimError::Config(_))));
    }
}
