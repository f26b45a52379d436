//! Network of interconnected roads (NOIR).
//!
//! Every node is a unidirectional road element between two consecutive
//! junctions; an edge `(i, j)` means traffic leaving road `i` may enter road
//! `j`. Roads are numbered `1..=N` with a contiguous three-way partition:
//! inlets `1..=N_in`, outlets `N_in+1..=N_out` and interior roads
//! `N_out+1..=N`. Only interior roads carry state.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default vehicle length used to derive road capacity, in meters.
pub const DEFAULT_VEHICLE_LENGTH_M: f64 = 4.5;

/// One-based road index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RoadId(usize);

impl RoadId {
    /// Panics on zero; road numbering starts at one.
    pub fn new(index: usize) -> Self {
        assert!(index >= 1, "road ids are one-based");
        RoadId(index)
    }

    pub fn get(self) -> usize {
        self.0
    }

    fn slot(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for RoadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoadClass {
    Inlet,
    Outlet,
    Interior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadGeometry {
    pub length_m: f64,
    pub lanes: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: road {index} outside 1..={n_total}")]
    Index {
        line: usize,
        index: usize,
        n_total: usize,
    },
    #[error("inconsistent partition: N_in={n_in}, N_out={n_out_end}, N={n_total}")]
    Partition {
        n_in: usize,
        n_out_end: usize,
        n_total: usize,
    },
    #[error("line {line}: self-loop on road {road}")]
    SelfLoop { line: usize, road: usize },
    #[error("line {line}: duplicate edge ({from}, {to})")]
    DuplicateEdge { line: usize, from: usize, to: usize },
    #[error("unknown road {0}")]
    UnknownRoad(usize),
    #[error("grid generation: {0}")]
    Grid(String),
    #[error("vehicle length must be positive, got {0}")]
    VehicleLength(f64),
}

/// Directed road graph with the inlet/outlet/interior partition.
///
/// Immutable once built; neighbor sets are precomputed and sorted.
#[derive(Debug, Clone)]
pub struct NoirGraph {
    n_in: usize,
    n_out_end: usize,
    n_total: usize,
    geometry: Vec<Option<RoadGeometry>>,
    in_nb: Vec<Vec<RoadId>>,
    out_nb: Vec<Vec<RoadId>>,
    rho_max: Vec<f64>,
    vehicle_length_m: f64,
}

impl PartialEq for NoirGraph {
    fn eq(&self, other: &Self) -> bool {
        self.n_in == other.n_in
            && self.n_out_end == other.n_out_end
            && self.n_total == other.n_total
            && self.geometry == other.geometry
            && self.out_nb == other.out_nb
            && self.vehicle_length_m == other.vehicle_length_m
    }
}

impl NoirGraph {
    /// Builds a graph from explicit parts. Edge and index checks match
    /// [`load_noir`]; structural premises are left to [`validate`].
    pub fn from_parts(
        n_in: usize,
        n_out_end: usize,
        n_total: usize,
        geometry: Vec<Option<RoadGeometry>>,
        edges: &[(usize, usize)],
        vehicle_length_m: f64,
    ) -> Result<Self, GraphError> {
        check_partition(n_in, n_out_end, n_total)?;
        if !(vehicle_length_m > 0.0) || !vehicle_length_m.is_finite() {
            return Err(GraphError::VehicleLength(vehicle_length_m));
        }
        if geometry.len() != n_total {
            return Err(GraphError::Partition {
                n_in,
                n_out_end,
                n_total,
            });
        }
        let mut builder = Builder::new(n_in, n_out_end, n_total);
        builder.geometry = geometry;
        for &(from, to) in edges {
            builder.add_edge(0, from, to)?;
        }
        Ok(builder.finish(vehicle_length_m))
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    /// Last outlet index (`N_out`), which is also the number of boundary roads.
    pub fn n_out_end(&self) -> usize {
        self.n_out_end
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn n_boundary(&self) -> usize {
        self.n_out_end
    }

    pub fn n_interior(&self) -> usize {
        self.n_total - self.n_out_end
    }

    pub fn vehicle_length_m(&self) -> f64 {
        self.vehicle_length_m
    }

    pub fn class(&self, id: RoadId) -> RoadClass {
        let i = id.get();
        if i <= self.n_in {
            RoadClass::Inlet
        } else if i <= self.n_out_end {
            RoadClass::Outlet
        } else {
            RoadClass::Interior
        }
    }

    pub fn roads(&self) -> impl Iterator<Item = RoadId> {
        (1..=self.n_total).map(RoadId)
    }

    pub fn inlets(&self) -> impl Iterator<Item = RoadId> {
        (1..=self.n_in).map(RoadId)
    }

    pub fn outlets(&self) -> impl Iterator<Item = RoadId> {
        (self.n_in + 1..=self.n_out_end).map(RoadId)
    }

    /// Inlets then outlets, the order of the boundary control vector.
    pub fn boundary(&self) -> impl Iterator<Item = RoadId> {
        (1..=self.n_out_end).map(RoadId)
    }

    pub fn interior(&self) -> impl Iterator<Item = RoadId> {
        (self.n_out_end + 1..=self.n_total).map(RoadId)
    }

    /// Position of an interior road inside the state vector.
    pub fn state_index(&self, id: RoadId) -> Option<usize> {
        (self.class(id) == RoadClass::Interior).then(|| id.get() - self.n_out_end - 1)
    }

    /// Road id for a state-vector position.
    pub fn interior_road(&self, state_index: usize) -> RoadId {
        RoadId(state_index + self.n_out_end + 1)
    }

    pub fn contains(&self, id: RoadId) -> bool {
        id.get() <= self.n_total
    }

    fn checked(&self, id: RoadId) -> Result<usize, GraphError> {
        if self.contains(id) {
            Ok(id.slot())
        } else {
            Err(GraphError::UnknownRoad(id.get()))
        }
    }

    /// `I_i = { j | (j, i) ∈ E }`, sorted.
    pub fn in_neighbors(&self, id: RoadId) -> Result<&[RoadId], GraphError> {
        Ok(&self.in_nb[self.checked(id)?])
    }

    /// `O_i = { j | (i, j) ∈ E }`, sorted.
    pub fn out_neighbors(&self, id: RoadId) -> Result<&[RoadId], GraphError> {
        Ok(&self.out_nb[self.checked(id)?])
    }

    // Infallible accessors for code that already iterates valid ids.
    pub(crate) fn ins(&self, id: RoadId) -> &[RoadId] {
        &self.in_nb[id.slot()]
    }

    pub(crate) fn outs(&self, id: RoadId) -> &[RoadId] {
        &self.out_nb[id.slot()]
    }

    pub fn geometry(&self, id: RoadId) -> Option<RoadGeometry> {
        self.geometry.get(id.slot()).copied().flatten()
    }

    /// Capacity in vehicles. Boundary roads are never constrained and report
    /// `f64::INFINITY`; interior roads without geometry report NaN.
    pub fn rho_max(&self, id: RoadId) -> f64 {
        self.rho_max[id.slot()]
    }

    /// Capacities of the interior roads in state order.
    pub fn interior_capacity(&self) -> Vec<f64> {
        self.interior().map(|r| self.rho_max(r)).collect()
    }

    /// All edges in lexicographic order.
    pub fn edges(&self) -> Vec<(RoadId, RoadId)> {
        self.roads()
            .flat_map(|i| self.outs(i).iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.out_nb.iter().map(Vec::len).sum()
    }

    /// Renders the graph in the line-oriented network format.
    pub fn to_noir_string(&self) -> String {
        let mut out = format!("noir {} {} {}\n", self.n_in, self.n_out_end, self.n_total);
        for id in self.roads() {
            if let Some(g) = self.geometry(id) {
                out.push_str(&format!("road {} {} {}\n", id, g.length_m, g.lanes));
            }
        }
        for (i, j) in self.edges() {
            out.push_str(&format!("edge {i} {j}\n"));
        }
        out
    }
}

fn check_partition(n_in: usize, n_out_end: usize, n_total: usize) -> Result<(), GraphError> {
    if n_total == 0 || n_in > n_out_end || n_out_end > n_total {
        return Err(GraphError::Partition {
            n_in,
            n_out_end,
            n_total,
        });
    }
    Ok(())
}

struct Builder {
    n_in: usize,
    n_out_end: usize,
    n_total: usize,
    geometry: Vec<Option<RoadGeometry>>,
    edges: BTreeSet<(usize, usize)>,
}

impl Builder {
    fn new(n_in: usize, n_out_end: usize, n_total: usize) -> Self {
        Builder {
            n_in,
            n_out_end,
            n_total,
            geometry: vec![None; n_total],
            edges: BTreeSet::new(),
        }
    }

    fn index(&self, line: usize, index: usize) -> Result<usize, GraphError> {
        if index == 0 || index > self.n_total {
            Err(GraphError::Index {
                line,
                index,
                n_total: self.n_total,
            })
        } else {
            Ok(index)
        }
    }

    fn add_edge(&mut self, line: usize, from: usize, to: usize) -> Result<(), GraphError> {
        self.index(line, from)?;
        self.index(line, to)?;
        if from == to {
            return Err(GraphError::SelfLoop { line, road: from });
        }
        if !self.edges.insert((from, to)) {
            return Err(GraphError::DuplicateEdge { line, from, to });
        }
        Ok(())
    }

    fn finish(self, vehicle_length_m: f64) -> NoirGraph {
        let n = self.n_total;
        let mut in_nb = vec![Vec::new(); n];
        let mut out_nb = vec![Vec::new(); n];
        for &(i, j) in &self.edges {
            out_nb[i - 1].push(RoadId(j));
            in_nb[j - 1].push(RoadId(i));
        }
        for v in in_nb.iter_mut() {
            v.sort_unstable();
        }
        let rho_max = (1..=n)
            .map(|i| {
                if i <= self.n_out_end {
                    f64::INFINITY
                } else {
                    match self.geometry[i - 1] {
                        Some(g) => g.lanes as f64 * g.length_m / vehicle_length_m,
                        None => f64::NAN,
                    }
                }
            })
            .collect();
        NoirGraph {
            n_in: self.n_in,
            n_out_end: self.n_out_end,
            n_total: n,
            geometry: self.geometry,
            in_nb,
            out_nb,
            rho_max,
            vehicle_length_m,
        }
    }
}

/// Parses the network format:
///
/// ```text
/// noir <N_in> <N_out> <N>
/// road <id> <length_m> <lanes>
/// edge <from> <to>
/// # comment
/// ```
///
/// The header must come first; everything after it is order-insensitive.
pub fn load_noir(document: &str, vehicle_length_m: f64) -> Result<NoirGraph, GraphError> {
    let mut builder: Option<Builder> = None;
    for (lineno, raw) in document.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let parse_err = |message: String| GraphError::Parse { line, message };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(format!("expected a non-negative integer, got `{s}`")))
        };
        match (fields[0], builder.as_mut()) {
            ("noir", None) => {
                if fields.len() != 4 {
                    return Err(parse_err("header must be `noir <N_in> <N_out> <N>`".into()));
                }
                let (n_in, n_out, n) = (int(fields[1])?, int(fields[2])?, int(fields[3])?);
                check_partition(n_in, n_out, n)?;
                builder = Some(Builder::new(n_in, n_out, n));
            }
            ("noir", Some(_)) => return Err(parse_err("duplicate header".into())),
            (_, None) => {
                return Err(parse_err("expected header `noir <N_in> <N_out> <N>` first".into()))
            }
            ("road", Some(b)) => {
                if fields.len() != 4 {
                    return Err(parse_err("road line must be `road <id> <length_m> <lanes>`".into()));
                }
                let id = b.index(line, int(fields[1])?)?;
                let length_m: f64 = fields[2]
                    .parse()
                    .map_err(|_| parse_err(format!("bad length `{}`", fields[2])))?;
                if !(length_m > 0.0) || !length_m.is_finite() {
                    return Err(parse_err(format!("road length must be positive, got {length_m}")));
                }
                let lanes: u32 = fields[3]
                    .parse()
                    .map_err(|_| parse_err(format!("bad lane count `{}`", fields[3])))?;
                if lanes == 0 {
                    return Err(parse_err("lane count must be at least 1".into()));
                }
                if b.geometry[id - 1].is_some() {
                    return Err(parse_err(format!("road {id} declared twice")));
                }
                b.geometry[id - 1] = Some(RoadGeometry { length_m, lanes });
            }
            ("edge", Some(b)) => {
                if fields.len() != 3 {
                    return Err(parse_err("edge line must be `edge <from> <to>`".into()));
                }
                b.add_edge(line, int(fields[1])?, int(fields[2])?)?;
            }
            (other, Some(_)) => return Err(parse_err(format!("unknown record `{other}`"))),
        }
    }
    if !(vehicle_length_m > 0.0) || !vehicle_length_m.is_finite() {
        return Err(GraphError::VehicleLength(vehicle_length_m));
    }
    builder
        .map(|b| b.finish(vehicle_length_m))
        .ok_or(GraphError::Parse {
            line: 0,
            message: "empty document: missing `noir` header".into(),
        })
}

/// Where a validation finding applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subject {
    Network,
    Road(RoadId),
    Edge(RoadId, RoadId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Network => write!(f, "network"),
            Subject::Road(r) => write!(f, "road {r}"),
            Subject::Edge(a, b) => write!(f, "edge ({a}, {b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub subject: Subject,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, rule: &'static str, subject: Subject, message: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            subject,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return writeln!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{}: {}: {}", v.rule, v.subject, v.message)?;
        }
        Ok(())
    }
}

pub mod rules {
    pub const MISSING_INLET: &str = "missing-inlet";
    pub const MISSING_OUTLET: &str = "missing-outlet";
    pub const INLET_HAS_IN_NEIGHBOR: &str = "inlet-has-in-neighbor";
    pub const OUTLET_HAS_OUT_NEIGHBOR: &str = "outlet-has-out-neighbor";
    pub const INLET_OUT_NEIGHBOR_NOT_INTERIOR: &str = "inlet-out-neighbor-not-interior";
    pub const ISOLATED_ROAD: &str = "isolated-road";
    pub const INTERIOR_DEAD_END: &str = "interior-dead-end";
    pub const NO_EXIT_PATH: &str = "no-exit-path";
    pub const MISSING_GEOMETRY: &str = "missing-geometry";
}

/// Checks the structural premises of the stability result plus the graph
/// invariants the dynamics rely on. Violations are data, not errors.
pub fn validate(g: &NoirGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    if g.n_in == 0 {
        report.push(rules::MISSING_INLET, Subject::Network, "network has no inlet road");
    }
    if g.n_out_end == g.n_in {
        report.push(rules::MISSING_OUTLET, Subject::Network, "network has no outlet road");
    }
    for id in g.roads() {
        let (ins, outs) = (g.ins(id), g.outs(id));
        if ins.is_empty() && outs.is_empty() {
            report.push(rules::ISOLATED_ROAD, Subject::Road(id), "isolated road");
        }
        match g.class(id) {
            RoadClass::Inlet => {
                for &j in ins {
                    report.push(
                        rules::INLET_HAS_IN_NEIGHBOR,
                        Subject::Edge(j, id),
                        "inlet must have no in-neighbors",
                    );
                }
                for &j in outs {
                    if g.class(j) != RoadClass::Interior {
                        report.push(
                            rules::INLET_OUT_NEIGHBOR_NOT_INTERIOR,
                            Subject::Edge(id, j),
                            "inlet out-neighbor must be interior",
                        );
                    }
                }
            }
            RoadClass::Outlet => {
                for &j in outs {
                    report.push(
                        rules::OUTLET_HAS_OUT_NEIGHBOR,
                        Subject::Edge(id, j),
                        "outlet must have no out-neighbors",
                    );
                }
            }
            RoadClass::Interior => {
                if outs.is_empty() {
                    report.push(
                        rules::INTERIOR_DEAD_END,
                        Subject::Road(id),
                        "interior road has no out-neighbor",
                    );
                }
                let cap = g.rho_max(id);
                if !(cap.is_finite() && cap > 0.0) {
                    report.push(
                        rules::MISSING_GEOMETRY,
                        Subject::Road(id),
                        "interior road needs a `road` line with positive length and lanes",
                    );
                }
            }
        }
    }
    // Every interior road must be able to reach an outlet, otherwise vehicles
    // can be trapped and the dynamics are not strictly contracting.
    let mut reaches = vec![false; g.n_total];
    let mut queue: VecDeque<RoadId> = g.outlets().collect();
    for o in g.outlets() {
        reaches[o.slot()] = true;
    }
    while let Some(r) = queue.pop_front() {
        for &up in g.ins(r) {
            if !reaches[up.slot()] {
                reaches[up.slot()] = true;
                queue.push_back(up);
            }
        }
    }
    if g.n_out_end > g.n_in {
        for id in g.interior() {
            if !reaches[id.slot()] && !g.outs(id).is_empty() {
                report.push(
                    rules::NO_EXIT_PATH,
                    Subject::Road(id),
                    "no directed path from this road to any outlet",
                );
            }
        }
    }
    report
}

/// Geometry and placement knobs for the synthetic grid generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_inlets: usize,
    pub n_outlets: usize,
    pub seed: u64,
    /// Road lengths are drawn uniformly from this closed range.
    pub length_m: (f64, f64),
    /// Lane counts are drawn uniformly from this closed range.
    pub lanes: (u32, u32),
    pub vehicle_length_m: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, n_inlets: usize, n_outlets: usize, seed: u64) -> Self {
        GridSpec {
            rows,
            cols,
            n_inlets,
            n_outlets,
            seed,
            length_m: DEFAULT_GRID_LENGTH_M,
            lanes: DEFAULT_GRID_LANES,
            vehicle_length_m: DEFAULT_VEHICLE_LENGTH_M,
        }
    }
}

pub const DEFAULT_GRID_LENGTH_M: (f64, f64) = (1500.0, 2100.0);
pub const DEFAULT_GRID_LANES: (u32, u32) = (5, 5);

/// Manhattan grid with the default geometry. See [`generate_grid_with`].
pub fn generate_grid(
    rows: usize,
    cols: usize,
    n_inlets: usize,
    n_outlets: usize,
    seed: u64,
) -> Result<NoirGraph, GraphError> {
    generate_grid_with(&GridSpec::new(rows, cols, n_inlets, n_outlets, seed))
}

#[derive(Clone, Copy)]
enum Side {
    West,
    North,
    East,
    South,
}

/// Spreads `count` items over `len` slots, deterministic and distinct.
fn spread(count: usize, len: usize) -> Vec<usize> {
    (0..count).map(|t| ((2 * t + 1) * len) / (2 * count)).collect()
}

/// Boundary junction positions for `count` roads alternating between two
/// sides, starting with `first`.
fn place(
    count: usize,
    first: (Side, usize),
    second: (Side, usize),
) -> Result<Vec<(Side, usize)>, GraphError> {
    let n_first = count.div_ceil(2);
    let n_second = count / 2;
    if n_first > first.1 || n_second > second.1 {
        return Err(GraphError::Grid(format!(
            "cannot place {count} boundary roads on sides of {} and {} junctions",
            first.1, second.1
        )));
    }
    let a = spread(n_first, first.1);
    let b = spread(n_second, second.1);
    let mut out = Vec::with_capacity(count);
    for t in 0..count {
        if t % 2 == 0 {
            out.push((first.0, a[t / 2]));
        } else {
            out.push((second.0, b[t / 2]));
        }
    }
    Ok(out)
}

/// Generates a Manhattan grid of `rows × cols` junctions joined by two-way
/// streets, each street being a pair of unidirectional road elements.
///
/// Road numbering: inlets, then outlets, then interior roads in junction
/// order. Inlets enter on the west and north perimeter, outlets leave on the
/// east and south perimeter, assigned round-robin between the two sides.
/// Each inlet feeds the single interior road continuing straight on from its
/// junction; each outlet is fed by the single interior road arriving straight
/// at its junction. At every junction, an arriving road connects to every
/// road leaving that junction (U-turns included).
pub fn generate_grid_with(spec: &GridSpec) -> Result<NoirGraph, GraphError> {
    let GridSpec {
        rows,
        cols,
        n_inlets,
        n_outlets,
        ..
    } = *spec;
    if rows < 2 || cols < 2 {
        return Err(GraphError::Grid("rows, cols ≥ 2 required".into()));
    }
    if n_inlets == 0 || n_outlets == 0 {
        return Err(GraphError::Grid("need at least one inlet and one outlet".into()));
    }
    let (lo, hi) = spec.length_m;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(GraphError::Grid(format!("bad length range [{lo}, {hi}]")));
    }
    if spec.lanes.0 == 0 || spec.lanes.1 < spec.lanes.0 {
        return Err(GraphError::Grid(format!(
            "bad lane range [{}, {}]",
            spec.lanes.0, spec.lanes.1
        )));
    }
    let inlets = place(n_inlets, (Side::West, rows), (Side::North, cols))?;
    let outlets = place(n_outlets, (Side::East, rows), (Side::South, cols))?;

    let junction = |r: usize, c: usize| r * cols + c;
    // Interior roads as (tail junction, head junction), in deterministic order.
    let mut streets = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let here = junction(r, c);
            if r > 0 {
                streets.push((here, junction(r - 1, c)));
            }
            if c + 1 < cols {
                streets.push((here, junction(r, c + 1)));
            }
            if r + 1 < rows {
                streets.push((here, junction(r + 1, c)));
            }
            if c > 0 {
                streets.push((here, junction(r, c - 1)));
            }
        }
    }
    let n_boundary = n_inlets + n_outlets;
    let n_total = n_boundary + streets.len();
    let road_of = |tail: usize, head: usize| -> usize {
        let k = streets
            .iter()
            .position(|&s| s == (tail, head))
            .expect("street exists");
        n_boundary + k + 1
    };

    let mut edges = Vec::new();
    let mut leaving: Vec<Vec<usize>> = vec![Vec::new(); rows * cols];
    for (k, &(tail, _)) in streets.iter().enumerate() {
        leaving[tail].push(n_boundary + k + 1);
    }
    for (k, &(_, head)) in streets.iter().enumerate() {
        for &next in &leaving[head] {
            edges.push((n_boundary + k + 1, next));
        }
    }
    for (t, &(side, pos)) in inlets.iter().enumerate() {
        let target = match side {
            Side::West => road_of(junction(pos, 0), junction(pos, 1)),
            Side::North => road_of(junction(0, pos), junction(1, pos)),
            _ => unreachable!("inlets sit on west/north"),
        };
        edges.push((t + 1, target));
    }
    for (t, &(side, pos)) in outlets.iter().enumerate() {
        let source = match side {
            Side::East => road_of(junction(pos, cols - 2), junction(pos, cols - 1)),
            Side::South => road_of(junction(rows - 2, pos), junction(rows - 1, pos)),
            _ => unreachable!("outlets sit on east/south"),
        };
        edges.push((source, n_inlets + t + 1));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = (0..n_total)
        .map(|_| {
            let length_m = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let lanes = rng.random_range(spec.lanes.0..=spec.lanes.1);
            Some(RoadGeometry { length_m, lanes })
        })
        .collect();
    NoirGraph::from_parts(
        n_inlets,
        n_boundary,
        n_total,
        geometry,
        &edges,
        spec.vehicle_length_m,
    )
}
