//! Long-format trace CSV (`k,road_or_flow_id,kind,value`) and the run summary.
//!
//! Densities are written for `k = 0..=K`; every other kind for `k = 1..=K`.
//! Aggregate kinds use the id `net`. Values use the shortest decimal form
//! that round-trips, so identical runs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{self, Write};

use thiserror::Error;

use crate::graph::NoirGraph;
use crate::qp::QpStatus;
use crate::sim::{self, SimulationTrace};

pub const HEADER: &str = "k,road_or_flow_id,kind,value";

/// Steady-state window for summaries and plots, shortened for runs with
/// fewer steps.
pub const STEADY_WINDOW: usize = 50;
pub const STEADY_TOL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Density,
    InflowU,
    OutflowV,
    Objective,
    RhoSumU,
    RhoSumV,
    SpectralRadius,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Density,
        Kind::InflowU,
        Kind::OutflowV,
        Kind::Objective,
        Kind::RhoSumU,
        Kind::RhoSumV,
        Kind::SpectralRadius,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Density => "density",
            Kind::InflowU => "inflow_u",
            Kind::OutflowV => "outflow_v",
            Kind::Objective => "objective",
            Kind::RhoSumU => "rho_sum_u",
            Kind::RhoSumV => "rho_sum_v",
            Kind::SpectralRadius => "spectral_radius",
        }
    }

    /// Aggregate kinds carry the id `net` instead of a road number.
    pub fn is_aggregate(self) -> bool {
        matches!(
            self,
            Kind::Objective | Kind::RhoSumU | Kind::RhoSumV | Kind::SpectralRadius
        )
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SeriesId {
    Road(usize),
    Net,
}

impl fmt::Display for SeriesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeriesId::Road(r) => write!(f, "{r}"),
            SeriesId::Net => f.write_str("net"),
        }
    }
}

/// Writes the trace in long format.
pub fn write_csv<W: Write>(mut w: W, trace: &SimulationTrace, g: &NoirGraph) -> io::Result<()> {
    writeln!(w, "{HEADER}")?;
    let density = |w: &mut W, k: usize| -> io::Result<()> {
        for (i, v) in trace.states[k].iter().enumerate() {
            writeln!(w, "{k},{},density,{v}", g.interior_road(i))?;
        }
        Ok(())
    };
    density(&mut w, 0)?;
    for (idx, (rec, control)) in trace.steps.iter().zip(&trace.controls).enumerate() {
        let k = idx + 1;
        density(&mut w, k)?;
        for (j, v) in control.s.iter().enumerate() {
            let kind = if j < control.n_in { Kind::InflowU } else { Kind::OutflowV };
            writeln!(w, "{k},{},{kind},{v}", j + 1)?;
        }
        writeln!(w, "{k},net,objective,{}", rec.objective)?;
        writeln!(w, "{k},net,rho_sum_u,{}", rec.sum_u)?;
        writeln!(w, "{k},net,rho_sum_v,{}", rec.sum_v)?;
        writeln!(w, "{k},net,spectral_radius,{}", rec.spectral_radius)?;
    }
    w.flush()
}

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

/// A parsed trace: one time series per `(kind, id)`, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceTable {
    series: BTreeMap<(Kind, SeriesId), Vec<(usize, f64)>>,
}

impl TraceTable {
    pub fn series(&self, kind: Kind, id: SeriesId) -> &[(usize, f64)] {
        self.series.get(&(kind, id)).map_or(&[], Vec::as_slice)
    }

    /// Road ids present for a kind, ascending.
    pub fn roads(&self, kind: Kind) -> Vec<usize> {
        self.series
            .keys()
            .filter_map(|&(k, id)| match id {
                SeriesId::Road(r) if k == kind => Some(r),
                _ => None,
            })
            .collect()
    }

    pub fn aggregate(&self, kind: Kind) -> &[(usize, f64)] {
        self.series(kind, SeriesId::Net)
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

pub fn parse_csv(text: &str) -> Result<TraceTable, TraceError> {
    let err = |line: usize, message: String| TraceError { line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header `{HEADER}`, got `{h}`"))),
        None => return Err(err(1, "empty trace".into())),
    }
    let mut table = TraceTable::default();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        let [k, id, kind, value] = fields[..] else {
            return Err(err(line, format!("expected 4 fields, got {}", fields.len())));
        };
        let k: usize = k
            .parse()
            .map_err(|_| err(line, format!("step `{k}` is not a non-negative integer")))?;
        let kind: Kind = kind.parse().map_err(|m| err(line, m))?;
        let id = match (kind.is_aggregate(), id) {
            (true, "net") => SeriesId::Net,
            (true, other) => return Err(err(line, format!("{kind} needs id `net`, got `{other}`"))),
            (false, other) => SeriesId::Road(
                other
                    .parse()
                    .map_err(|_| err(line, format!("road id `{other}` is not an integer")))?,
            ),
        };
        let value: f64 = value
            .parse()
            .map_err(|_| err(line, format!("value `{value}` is not a number")))?;
        if !value.is_finite() {
            return Err(err(line, format!("value `{value}` is not finite")));
        }
        let series = table.series.entry((kind, id)).or_default();
        if series.last().is_some_and(|&(prev, _)| prev >= k) {
            return Err(err(line, format!("step {k} out of order for {kind} {id}")));
        }
        series.push((k, value));
    }
    if table.is_empty() {
        return Err(err(1, "trace has a header but no rows".into()));
    }
    Ok(table)
}

/// Window used for a run of `steps` steps.
pub fn steady_window(steps: usize) -> usize {
    STEADY_WINDOW.min(steps)
}

/// Invariant audit and headline numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub beta: f64,
    pub d0: f64,
    pub n_interior: usize,
    pub steady_window: usize,
    pub steady_state: Option<usize>,
    /// Means of `Σu`, `Σv` from the steady-state index on.
    pub steady_means: Option<(f64, f64)>,
    pub max_budget_error: f64,
    pub min_control: f64,
    pub min_density: f64,
    /// `max_k max_i (x_i[k] − x_max_i)`; non-positive when caps hold.
    pub max_cap_excess: f64,
    pub max_clamped: f64,
    pub max_predicted_violation: f64,
    pub optimal_steps: usize,
    pub fallback_steps: usize,
    pub qp_iterations: usize,
    pub max_kkt: f64,
    pub max_spectral_radius: f64,
    pub bibo: sim::BiboReport,
    /// Largest per-step mass imbalance, when models were retained.
    pub max_imbalance: Option<f64>,
}

pub fn summarize(trace: &SimulationTrace, g: &NoirGraph) -> RunSummary {
    let steps = trace.steps.len();
    let window = steady_window(steps);
    let (su, sv) = (trace.sum_u(), trace.sum_v());
    let steady_state = sim::detect_steady_state(&su, &sv, window, STEADY_TOL);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let steady_means = steady_state.map(|k| (mean(&su[k - 1..]), mean(&sv[k - 1..])));
    let max_budget_error = trace
        .steps
        .iter()
        .zip(&trace.controls)
        .map(|(r, c)| (c.total() - r.d0_used).abs())
        .fold(0.0, f64::max);
    let min_control = trace
        .controls
        .iter()
        .flat_map(|c| c.s.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let min_density = trace.states.iter().map(|x| x.min()).fold(f64::INFINITY, f64::min);
    let max_cap_excess = trace
        .states
        .iter()
        .map(|x| (x - &trace.x_max).max())
        .fold(f64::NEG_INFINITY, f64::max);
    let fold_max = |f: fn(&sim::StepRecord) -> f64| trace.steps.iter().map(f).fold(0.0, f64::max);
    let max_imbalance = trace.models.as_ref().and_then(|models| {
        sim::conservation_audit(trace, g, models, f64::INFINITY)
            .ok()
            .map(|r| r.max_imbalance())
    });
    RunSummary {
        seed: trace.seed,
        steps,
        beta: trace.config.controller.beta,
        d0: trace.config.controller.d0,
        n_interior: trace.x_max.len(),
        steady_window: window,
        steady_state,
        steady_means,
        max_budget_error,
        min_control,
        min_density,
        max_cap_excess,
        max_clamped: fold_max(|r| r.clamped),
        max_predicted_violation: fold_max(|r| r.predicted_violation),
        optimal_steps: trace.steps.iter().filter(|r| r.status == QpStatus::Optimal).count(),
        fallback_steps: trace.steps.iter().filter(|r| r.halvings > 0).count(),
        qp_iterations: trace.steps.iter().map(|r| r.iterations).sum(),
        max_kkt: fold_max(|r| r.kkt_max),
        max_spectral_radius: trace.max_spectral_radius(),
        bibo: sim::bibo_check(trace),
        max_imbalance,
    }
}

impl RunSummary {
    pub fn render(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(o, "{k:<26}{v}");
        };
        kv("seed", &self.seed);
        kv("steps", &self.steps);
        kv("beta", &self.beta);
        kv("d0", &self.d0);
        kv("interior_roads", &self.n_interior);
        kv("steady_state_window", &self.steady_window);
        kv("steady_state_tol", &STEADY_TOL);
        match (self.steady_state, self.steady_means) {
            (Some(k), Some((u, v))) => {
                kv("steady_state_index", &k);
                kv("steady_mean_sum_u", &format_args!("{u:.6}"));
                kv("steady_mean_sum_v", &format_args!("{v:.6}"));
            }
            _ => kv("steady_state_index", &"none"),
        }
        kv("max_budget_error", &format_args!("{:.3e}", self.max_budget_error));
        kv("min_control", &format_args!("{:.3e}", self.min_control));
        kv("min_density", &format_args!("{:.3e}", self.min_density));
        kv("max_cap_excess", &format_args!("{:.3e}", self.max_cap_excess));
        kv("max_clamped", &format_args!("{:.3e}", self.max_clamped));
        kv("max_predicted_violation", &format_args!("{:.3e}", self.max_predicted_violation));
        kv("optimal_steps", &format_args!("{}/{}", self.optimal_steps, self.steps));
        kv("fallback_steps", &self.fallback_steps);
        kv("qp_iterations", &self.qp_iterations);
        kv("max_kkt_residual", &format_args!("{:.3e}", self.max_kkt));
        kv("max_spectral_radius", &format_args!("{:.6}", self.max_spectral_radius));
        kv("bibo_max_norm_sq", &format_args!("{:.6e}", self.bibo.max_norm_sq));
        kv("bibo_bound", &format_args!("{:.6e}", self.bibo.bound));
        kv("bibo_holds", &self.bibo.holds);
        match self.max_imbalance {
            Some(m) => kv("max_mass_imbalance", &format_args!("{m:.3e}")),
            None => kv("max_mass_imbalance", &"not audited"),
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_noir;
    use crate::sim::{run, SimulationConfig};

    fn four_road() -> NoirGraph {
        load_noir("noir 1 2 4\nroad 3 90 2\nroad 4 90 2\nedge 1 3\nedge 3 4\nedge 4 2\n", 4.5).unwrap()
    }

    fn short_run(steps: usize) -> (NoirGraph, SimulationTrace) {
        let g = four_road();
        let mut cfg = SimulationConfig {
            seed: 3,
            steps,
            ..SimulationConfig::default()
        };
        cfg.controller.d0 = 4.0;
        let t = run(&g, &cfg).unwrap();
        (g, t)
    }

    #[test]
    fn row_counts_and_round_trip() {
        let (g, t) = short_run(10);
        let mut buf = Vec::new();
        write_csv(&mut buf, &t, &g).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // 2 densities × 11 states, then per step 2 controls + 4 aggregates
        assert_eq!(text.lines().count(), 1 + 2 * 11 + 10 * 6);

        let table = parse_csv(&text).unwrap();
        assert_eq!(table.roads(Kind::Density), vec![3, 4]);
        assert_eq!(table.roads(Kind::InflowU), vec![1]);
        assert_eq!(table.roads(Kind::OutflowV), vec![2]);
        let u = table.series(Kind::InflowU, SeriesId::Road(1));
        assert_eq!(u.len(), 10);
        for (k, (step, v)) in u.iter().enumerate() {
            assert_eq!(*step, k + 1);
            assert_eq!(*v, t.controls[k].s[0]);
        }
        let d = table.series(Kind::Density, SeriesId::Road(4));
        assert_eq!(d[0], (0, t.states[0][1]));
        assert_eq!(table.aggregate(Kind::RhoSumV).len(), 10);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = |body: &str| parse_csv(&format!("{HEADER}\n1,net,objective,2\n{body}\n")).unwrap_err();
        assert_eq!(bad("2,net,objective").line, 3);
        assert_eq!(bad("2,net,speed,1").line, 3);
        assert_eq!(bad("2,7,objective,1").line, 3);
        assert_eq!(bad("x,net,objective,1").line, 3);
        assert_eq!(bad("2,net,objective,abc").line, 3);
        assert_eq!(bad("1,net,objective,3").line, 3);
        assert_eq!(bad("2,road,density,1").line, 3);
        assert_eq!(parse_csv("k,id,kind,value\n").unwrap_err().line, 1);
        assert_eq!(parse_csv("").unwrap_err().line, 1);
        assert_eq!(parse_csv(&format!("{HEADER}\n")).unwrap_err().line, 1);
    }

    #[test]
    fn summary_reports_invariants() {
        let (g, t) = short_run(10);
        let s = summarize(&t, &g);
        assert_eq!(s.steady_window, 10);
        assert!(s.max_budget_error <= 1e-8);
        assert!(s.min_control >= 0.0);
        assert!(s.max_cap_excess <= 0.0);
        assert_eq!(s.optimal_steps, 10);
        assert!(s.max_imbalance.unwrap() <= 1e-9);
        let text = s.render();
        assert!(text.contains("optimal_steps             10/10"));
        assert!(text.lines().any(|l| l.starts_with("steady_state_index")));
    }
}
