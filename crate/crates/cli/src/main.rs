//! `noir`: validate networks, run and sweep closed-loop simulations, plot traces.
//!
//! Exit codes: 0 ok, 1 validation or infeasibility, 2 I/O, 3 internal
//! invariant breach or solver failure.

use std::fmt::Display;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use noir_core::config::{self, LoadError, NetworkError, RunConfig};
use noir_core::graph::{self, GraphError, GridSpec, NoirGraph, DEFAULT_VEHICLE_LENGTH_M};
use noir_core::mpc::MpcError;
use noir_core::sim::{self, SimError, SimulationTrace, StepError};
use noir_core::svg::{self, Selection};
use noir_core::trace;

#[derive(Parser)]
#[command(name = "noir", version, about = "Boundary control of a network of interconnected roads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network file against the structural rules.
    Validate {
        network: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VEHICLE_LENGTH_M)]
        vehicle_length_m: f64,
    },
    /// Run one closed-loop simulation.
    Run {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run one simulation per β with a shared seed.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        beta: Vec<f64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Plot the trace(s) in a run or sweep directory as SVG.
    Report {
        dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        inlets: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        outlets: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        interior: Option<Vec<usize>>,
    },
    /// Write a synthetic Manhattan grid network.
    GenGrid {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        inlets: usize,
        #[arg(long)]
        outlets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = graph::DEFAULT_GRID_LENGTH_M.0)]
        length_min_m: f64,
        #[arg(long, default_value_t = graph::DEFAULT_GRID_LENGTH_M.1)]
        length_max_m: f64,
        #[arg(long, default_value_t = graph::DEFAULT_GRID_LANES.0)]
        lanes_min: u32,
        #[arg(long, default_value_t = graph::DEFAULT_GRID_LANES.1)]
        lanes_max: u32,
        #[arg(short, long)]
        out: PathBuf,
    },
}

const EXIT_INVALID: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: impl Display) -> Self {
        Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io { .. } => Failure::new(EXIT_IO, e),
            LoadError::Config(_) => Failure::new(EXIT_INVALID, e),
        }
    }
}

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Io { .. } => Failure::new(EXIT_IO, e),
            NetworkError::Graph(_) => Failure::new(EXIT_INVALID, e),
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        Failure::new(EXIT_INVALID, e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::Config(_) => EXIT_INVALID,
            SimError::Step {
                source: StepError::Mpc(MpcError::Infeasible { .. } | MpcError::Config(_)),
                ..
            } => EXIT_INVALID,
            SimError::Step { .. } | SimError::Invariant { .. } => EXIT_INTERNAL,
            SimError::Io(_) => EXIT_IO,
        };
        Failure::new(code, e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate {
            network,
            vehicle_length_m,
        } => cmd_validate(&network, vehicle_length_m),
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::Sweep { config, beta, out } => cmd_sweep(&config, &beta, &out),
        Command::Report {
            dir,
            inlets,
            outlets,
            interior,
        } => cmd_report(&dir, inlets, outlets, interior),
        Command::GenGrid {
            rows,
            cols,
            inlets,
            outlets,
            seed,
            length_min_m,
            length_max_m,
            lanes_min,
            lanes_max,
            out,
        } => {
            let spec = GridSpec {
                length_m: (length_min_m, length_max_m),
                lanes: (lanes_min, lanes_max),
                ..GridSpec::new(rows, cols, inlets, outlets, seed)
            };
            cmd_gen_grid(&spec, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_validate(path: &Path, vehicle_length_m: f64) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    let g = graph::load_noir(&text, vehicle_length_m)?;
    let report = graph::validate(&g);
    println!(
        "{}: {} roads ({} inlets, {} outlets, {} interior), {} edges",
        path.display(),
        g.n_total(),
        g.n_in(),
        g.n_boundary() - g.n_in(),
        g.n_interior(),
        g.edge_count()
    );
    print!("{report}");
    if report.ok() {
        return Ok(());
    }
    Err(Failure::new(
        EXIT_INVALID,
        format!("{} rule violation(s)", report.violations.len()),
    ))
}

fn load_network(cfg: &RunConfig) -> Result<NoirGraph, Failure> {
    let g = cfg.network.load()?;
    let report = graph::validate(&g);
    if !report.ok() {
        return Err(Failure::new(
            EXIT_INVALID,
            format!("network fails validation:\n{}", report.to_string().trim_end()),
        ));
    }
    Ok(g)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

/// Writes `trace.csv`, `summary.txt` and `config.txt` into `dir`.
fn write_run(dir: &Path, cfg: &RunConfig, g: &NoirGraph, t: &SimulationTrace) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let csv = dir.join("trace.csv");
    let f = fs::File::create(&csv).map_err(|e| Failure::io(&csv, e))?;
    trace::write_csv(BufWriter::new(f), t, g).map_err(|e| Failure::io(&csv, e))?;
    write_file(&dir.join("summary.txt"), &trace::summarize(t, g).render())?;
    write_file(&dir.join("config.txt"), &config::render(cfg))
}

fn cmd_run(config_path: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config_path)?;
    let g = load_network(&cfg)?;
    let t = sim::run(&g, &cfg.sim)?;
    write_run(out, &cfg, &g, &t)?;
    print!("{}", trace::summarize(&t, &g).render());
    println!("wall_time_s               {:.3}", t.wall_time_s);
    Ok(())
}

/// Directory name for one β of a sweep, e.g. `beta_0.5`.
fn beta_dir(beta: f64) -> String {
    format!("beta_{beta}")
}

fn cmd_sweep(config_path: &Path, betas: &[f64], out: &Path) -> Result<(), Failure> {
    if betas.is_empty() {
        return Err(Failure::new(EXIT_INVALID, "no β values given"));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(Failure::new(EXIT_INVALID, format!("β must be finite and ≥ 0, got {b}")));
    }
    let base = RunConfig::load(config_path)?;
    let g = load_network(&base)?;
    let configs: Vec<RunConfig> = betas
        .iter()
        .map(|&b| {
            let mut c = base.clone();
            c.sim.controller.beta = b;
            c
        })
        .collect();
    let results: Vec<Result<SimulationTrace, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(|| sim::run(&g, &c.sim)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });

    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    let mut merged = format!("beta,{}\n", trace::HEADER);
    let mut worst: Option<Failure> = None;
    for ((beta, cfg), result) in betas.iter().zip(&configs).zip(results) {
        match result {
            Ok(t) => {
                let dir = out.join(beta_dir(*beta));
                write_run(&dir, cfg, &g, &t)?;
                let csv = fs::read_to_string(dir.join("trace.csv")).map_err(|e| Failure::io(&dir, e))?;
                for line in csv.lines().skip(1) {
                    merged.push_str(&format!("{beta},{line}\n"));
                }
                let s = trace::summarize(&t, &g);
                let steady = s.steady_state.map_or("none".to_string(), |k| k.to_string());
                println!(
                    "beta {beta}: steady_state {steady}, max_kkt {:.2e}, wall {:.2}s",
                    s.max_kkt, t.wall_time_s
                );
            }
            Err(e) => {
                let f = Failure::from(e);
                eprintln!("beta {beta}: {}", f.message);
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(Failure::new(f.code, format!("beta {beta}: {}", f.message)));
                }
            }
        }
    }
    write_file(&out.join("comparison.csv"), &merged)?;
    let betas_text: Vec<String> = betas.iter().map(|b| b.to_string()).collect();
    write_file(
        &out.join("sweep.txt"),
        &format!("seed = {}\nbetas = {}\n", base.sim.seed, betas_text.join(",")),
    )?;
    worst.map_or(Ok(()), Err)
}

fn cmd_report(
    dir: &Path,
    inlets: Option<Vec<usize>>,
    outlets: Option<Vec<usize>>,
    interior: Option<Vec<usize>>,
) -> Result<(), Failure> {
    let mut run_dirs = Vec::new();
    if dir.join("trace.csv").is_file() {
        run_dirs.push(dir.to_path_buf());
    } else {
        let entries = fs::read_dir(dir).map_err(|e| Failure::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Failure::io(dir, e))?.path();
            if path.join("trace.csv").is_file() {
                run_dirs.push(path);
            }
        }
        run_dirs.sort();
    }
    if run_dirs.is_empty() {
        return Err(Failure::new(
            EXIT_IO,
            format!("{}: no trace.csv found", dir.display()),
        ));
    }
    for run in run_dirs {
        let csv = run.join("trace.csv");
        let text = fs::read_to_string(&csv).map_err(|e| Failure::io(&csv, e))?;
        let table = trace::parse_csv(&text)
            .map_err(|e| Failure::new(EXIT_INVALID, format!("{}: {e}", csv.display())))?;
        let defaults = Selection::lowest_two(&table);
        let sel = Selection {
            inlets: inlets.clone().unwrap_or(defaults.inlets),
            outlets: outlets.clone().unwrap_or(defaults.outlets),
            interior: interior.clone().unwrap_or(defaults.interior),
        };
        for (name, svg) in svg::figures(&table, &sel) {
            let path = run.join(name);
            write_file(&path, &svg)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_gen_grid(spec: &GridSpec, out: &Path) -> Result<(), Failure> {
    let g = graph::generate_grid_with(spec)?;
    let report = graph::validate(&g);
    if !report.ok() {
        return Err(Failure::new(
            EXIT_INTERNAL,
            "generated grid fails validation",
        ));
    }
    write_file(out, &g.to_noir_string())?;
    println!(
        "{}: {} roads, {} interior, {} edges",
        out.display(),
        g.n_total(),
        g.n_interior(),
        g.edge_count()
    );
    Ok(())
}
