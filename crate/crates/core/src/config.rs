//! Experiment configuration files.
//!
//! Line-oriented `key = value` text in three sections:
//!
//! ```text
//! [network]
//! rows = 8
//! cols = 8
//! inlets = 4
//! outlets = 4
//!
//! [mpc]
//! beta = 0.5
//! d0 = 400
//!
//! [sim]
//! seed = 1
//! steps = 300
//! ```
//!
//! `#` starts a comment. Keys left out take their defaults. Unknown
//! sections, unknown keys and repeated keys are errors.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::{self, GraphError, GridSpec, NoirGraph, DEFAULT_VEHICLE_LENGTH_M};
use crate::probability::PRange;
use crate::sim::{InitialDensity, SimulationConfig};
use crate::state_space::InletColumns;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: `{key}`: {message}")]
    Value {
        line: usize,
        key: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkSource {
    File { path: PathBuf, vehicle_length_m: f64 },
    Grid(GridSpec),
}

impl NetworkSource {
    pub fn load(&self) -> Result<NoirGraph, NetworkError> {
        match self {
            NetworkSource::File {
                path,
                vehicle_length_m,
            } => {
                let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
                    path: path.clone(),
                    source,
                })?;
                Ok(graph::load_noir(&text, *vehicle_length_m)?)
            }
            NetworkSource::Grid(spec) => Ok(graph::generate_grid_with(spec)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkSource,
    pub sim: SimulationConfig,
}

impl RunConfig {
    /// Reads a config file; a relative network `file` resolves against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<RunConfig, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(parse(&text, base)?)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Network,
    Mpc,
    Sim,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Network => "network",
            Section::Mpc => "mpc",
            Section::Sim => "sim",
        }
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            Section::Network => &[
                "file",
                "rows",
                "cols",
                "inlets",
                "outlets",
                "grid_seed",
                "length_min_m",
                "length_max_m",
                "lanes_min",
                "lanes_max",
                "vehicle_length_m",
            ],
            Section::Mpc => &[
                "beta",
                "d0",
                "horizon",
                "enforce_nonnegativity",
                "fallback",
                "warm_start",
                "kkt_tol",
                "max_iter",
            ],
            Section::Sim => &[
                "seed",
                "steps",
                "p_min",
                "p_max",
                "init_min",
                "init_max",
                "inlet_columns",
                "retain_models",
            ],
        }
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

struct Table<'a> {
    entries: Vec<(Section, Entry<'a>)>,
}

impl<'a> Table<'a> {
    fn get(&self, section: Section, key: &str) -> Option<&Entry<'a>> {
        self.entries
            .iter()
            .find(|(s, e)| *s == section && e.key == key)
            .map(|(_, e)| e)
    }

    fn parse<T: std::str::FromStr>(&self, section: Section, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(e) = self.get(section, key) else {
            return Ok(None);
        };
        e.value.parse::<T>().map(Some).map_err(|err| ConfigError::Value {
            line: e.line,
            key: key.to_string(),
            message: format!("cannot parse `{}`: {err}", e.value),
        })
    }

    fn or<T: std::str::FromStr>(&self, section: Section, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parse(section, key)?.unwrap_or(default))
    }

    fn finite(&self, section: Section, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v: f64 = self.or(section, key, default)?;
        if !v.is_finite() {
            let line = self.get(section, key).map_or(0, |e| e.line);
            return Err(ConfigError::Value {
                line,
                key: key.into(),
                message: "must be finite".into(),
            });
        }
        Ok(v)
    }
}

fn tokenize(text: &str) -> Result<Table<'_>, ConfigError> {
    let mut section = None;
    let mut entries: Vec<(Section, Entry)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("unterminated section header `{content}`"),
            })?;
            section = Some(match name.trim() {
                "network" => Section::Network,
                "mpc" => Section::Mpc,
                "sim" => Section::Sim,
                other => {
                    return Err(ConfigError::UnknownSection {
                        line,
                        name: other.to_string(),
                    })
                }
            });
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = section else {
            return Err(ConfigError::Syntax {
                line,
                message: format!("`{key}` appears before any section header"),
            });
        };
        if !sec.keys().contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                section: sec.name().to_string(),
                key: key.to_string(),
            });
        }
        if entries.iter().any(|(s, e)| *s == sec && e.key == key) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::Value {
                line,
                key: key.to_string(),
                message: "empty value".into(),
            });
        }
        entries.push((sec, Entry { line, key, value }));
    }
    Ok(Table { entries })
}

/// Parses config text. `base` anchors a relative network `file`.
pub fn parse(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    use Section::*;
    let t = tokenize(text)?;

    let vehicle_length_m = t.finite(Network, "vehicle_length_m", DEFAULT_VEHICLE_LENGTH_M)?;
    let grid_keys = [
        "rows",
        "cols",
        "inlets",
        "outlets",
        "grid_seed",
        "length_min_m",
        "length_max_m",
        "lanes_min",
        "lanes_max",
    ];
    let network = if let Some(file) = t.get(Network, "file") {
        if let Some(k) = grid_keys.iter().find_map(|k| t.get(Network, k)) {
            return Err(ConfigError::Value {
                line: k.line,
                key: k.key.into(),
                message: "grid keys cannot be combined with `file`".into(),
            });
        }
        let path = Path::new(file.value);
        let path = if path.is_relative() {
            base.join(path)
        } else {
            path.to_path_buf()
        };
        NetworkSource::File {
            path,
            vehicle_length_m,
        }
    } else {
        let need = |key: &str| -> Result<usize, ConfigError> {
            t.parse(Network, key)?
                .ok_or_else(|| ConfigError::Invalid(format!("[network] needs `file` or `{key}`")))
        };
        let mut spec = GridSpec::new(need("rows")?, need("cols")?, need("inlets")?, need("outlets")?, 0);
        spec.seed = t.or(Network, "grid_seed", 0)?;
        spec.length_m = (
            t.finite(Network, "length_min_m", spec.length_m.0)?,
            t.finite(Network, "length_max_m", spec.length_m.1)?,
        );
        spec.lanes = (t.or(Network, "lanes_min", spec.lanes.0)?, t.or(Network, "lanes_max", spec.lanes.1)?);
        spec.vehicle_length_m = vehicle_length_m;
        NetworkSource::Grid(spec)
    };

    let mut sim = SimulationConfig::default();
    let c = &mut sim.controller;
    c.beta = t.finite(Mpc, "beta", c.beta)?;
    c.d0 = t.finite(Mpc, "d0", c.d0)?;
    c.horizon = t.or(Mpc, "horizon", c.horizon)?;
    c.enforce_nonnegativity = t.or(Mpc, "enforce_nonnegativity", c.enforce_nonnegativity)?;
    c.fallback = t.or(Mpc, "fallback", c.fallback)?;
    c.warm_start = t.or(Mpc, "warm_start", c.warm_start)?;
    c.qp.kkt_tol = t.finite(Mpc, "kkt_tol", c.qp.kkt_tol)?;
    c.qp.max_iter = t.or(Mpc, "max_iter", c.qp.max_iter)?;

    sim.seed = t.or(Sim, "seed", sim.seed)?;
    sim.steps = t.or(Sim, "steps", sim.steps)?;
    let p_min = t.finite(Sim, "p_min", sim.p_range.lo())?;
    let p_max = t.finite(Sim, "p_max", sim.p_range.hi())?;
    sim.p_range = PRange::new(p_min, p_max).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    sim.initial = InitialDensity {
        lo: t.finite(Sim, "init_min", sim.initial.lo)?,
        hi: t.finite(Sim, "init_max", sim.initial.hi)?,
    };
    if let Some(e) = t.get(Sim, "inlet_columns") {
        sim.inlet_columns = match e.value {
            "unit" => InletColumns::Unit,
            "routing" => InletColumns::RoutingFractions,
            other => {
                return Err(ConfigError::Value {
                    line: e.line,
                    key: e.key.into(),
                    message: format!("expected `unit` or `routing`, got `{other}`"),
                })
            }
        };
    }
    sim.retain_models = t.or(Sim, "retain_models", sim.retain_models)?;

    sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if !(sim.controller.beta >= 0.0) {
        return Err(ConfigError::Invalid("beta must be ≥ 0".into()));
    }
    if !(sim.controller.d0 > 0.0) {
        return Err(ConfigError::Invalid("d0 must be > 0".into()));
    }
    if sim.controller.horizon == 0 {
        return Err(ConfigError::Invalid("horizon must be ≥ 1".into()));
    }
    if !(vehicle_length_m > 0.0) {
        return Err(ConfigError::Invalid("vehicle_length_m must be > 0".into()));
    }
    Ok(RunConfig { network, sim })
}

/// Canonical text with every key spelled out; parses back to the same config.
pub fn render(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let o = &mut out;
    let kv = |o: &mut String, k: &str, v: &dyn fmt::Display| {
        let _ = writeln!(o, "{k} = {v}");
    };
    o.push_str("[network]\n");
    match &cfg.network {
        NetworkSource::File {
            path,
            vehicle_length_m,
        } => {
            kv(o, "file", &path.display());
            kv(o, "vehicle_length_m", vehicle_length_m);
        }
        NetworkSource::Grid(g) => {
            kv(o, "rows", &g.rows);
            kv(o, "cols", &g.cols);
            kv(o, "inlets", &g.n_inlets);
            kv(o, "outlets", &g.n_outlets);
            kv(o, "grid_seed", &g.seed);
            kv(o, "length_min_m", &g.length_m.0);
            kv(o, "length_max_m", &g.length_m.1);
            kv(o, "lanes_min", &g.lanes.0);
            kv(o, "lanes_max", &g.lanes.1);
            kv(o, "vehicle_length_m", &g.vehicle_length_m);
        }
    }
    let c = &cfg.sim.controller;
    o.push_str("\n[mpc]\n");
    kv(o, "beta", &c.beta);
    kv(o, "d0", &c.d0);
    kv(o, "horizon", &c.horizon);
    kv(o, "enforce_nonnegativity", &c.enforce_nonnegativity);
    kv(o, "fallback", &c.fallback);
    kv(o, "warm_start", &c.warm_start);
    kv(o, "kkt_tol", &c.qp.kkt_tol);
    kv(o, "max_iter", &c.qp.max_iter);
    let s = &cfg.sim;
    o.push_str("\n[sim]\n");
    kv(o, "seed", &s.seed);
    kv(o, "steps", &s.steps);
    kv(o, "p_min", &s.p_range.lo());
    kv(o, "p_max", &s.p_range.hi());
    kv(o, "init_min", &s.initial.lo);
    kv(o, "init_max", &s.initial.hi);
    let columns = match s.inlet_columns {
        InletColumns::Unit => "unit",
        InletColumns::RoutingFractions => "routing",
    };
    kv(o, "inlet_columns", &columns);
    kv(o, "retain_models", &s.retain_models);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        parse(text, Path::new("/cfg"))
    }

    const GRID: &str = "[network]\nrows = 3\ncols = 3\ninlets = 2\noutlets = 2\n";

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = parse_str(GRID).unwrap();
        assert_eq!(cfg.sim, SimulationConfig::default());
        let NetworkSource::Grid(spec) = cfg.network else {
            panic!("expected grid");
        };
        assert_eq!(spec, GridSpec::new(3, 3, 2, 2, 0));
    }

    #[test]
    fn unknown_key_is_an_error_with_line() {
        let err = parse_str(&format!("{GRID}[mpc]\nbta = 1\n")).unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 7,
                section: "mpc".into(),
                key: "bta".into()
            }
        );
    }

    #[test]
    fn unknown_section_and_duplicates_rejected() {
        assert!(matches!(
            parse_str("[solver]\n"),
            Err(ConfigError::UnknownSection { line: 1, .. })
        ));
        assert!(matches!(
            parse_str(&format!("{GRID}rows = 4\n")),
            Err(ConfigError::Duplicate { line: 6, .. })
        ));
        assert!(matches!(parse_str("rows = 4\n"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(matches!(
            parse_str(&format!("{GRID}[mpc]\nbeta = abc\n")),
            Err(ConfigError::Value { line: 7, .. })
        ));
        assert!(parse_str(&format!("{GRID}[mpc]\nbeta = -1\n")).is_err());
        assert!(parse_str(&format!("{GRID}[sim]\np_max = 1.0\n")).is_err());
        assert!(parse_str(&format!("{GRID}[sim]\nsteps = 0\n")).is_err());
        assert!(parse_str(&format!("{GRID}[sim]\ninlet_columns = split\n")).is_err());
        assert!(parse_str("[network]\nfile = a.noir\nrows = 3\n").is_err());
        assert!(parse_str("[network]\nrows = 3\n").is_err());
    }

    #[test]
    fn relative_file_resolves_against_base() {
        let cfg = parse_str("[network]\nfile = nets/a.noir # comment\n").unwrap();
        assert_eq!(
            cfg.network,
            NetworkSource::File {
                path: PathBuf::from("/cfg/nets/a.noir"),
                vehicle_length_m: DEFAULT_VEHICLE_LENGTH_M
            }
        );
    }

    #[test]
    fn render_round_trips() {
        let text = format!(
            "{GRID}length_min_m = 100.5\n[mpc]\nbeta = 0.5\nfallback = true\n[sim]\nseed = 9\np_min = 0.2\np_max = 0.4\ninlet_columns = routing\n"
        );
        let cfg = parse_str(&text).unwrap();
        let echoed = render(&cfg);
        assert_eq!(parse_str(&echoed).unwrap(), cfg);
        assert_eq!(render(&parse_str(&echoed).unwrap()), echoed);
    }
}
