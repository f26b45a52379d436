use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const FOUR_ROAD: &str = "noir 1 2 4\nroad 3 90 2\nroad 4 90 2\nedge 1 3\nedge 3 4\nedge 4 2\n";

fn noir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noir"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn noir")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn four_road_setup(steps: usize, d0: f64) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("four.noir"), FOUR_ROAD).unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        format!("[network]\nfile = four.noir\n\n[mpc]\nd0 = {d0}\n\n[sim]\nseed = 5\nsteps = {steps}\n"),
    )
    .unwrap();
    dir
}

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let out = noir(p, &["gen-grid", "--rows", "4", "--cols", "4", "--inlets", "2", "--outlets", "2", "-o", "g.noir"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(code(&noir(p, &["validate", "g.noir"])), 0);

    fs::write(p.join("bad.noir"), "noir 1 2 3\nroad 3 90 2\nedge 1 2\nedge 1 3\nedge 3 2\n").unwrap();
    let out = noir(p, &["validate", "bad.noir"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("inlet-out-neighbor-not-interior"));

    assert_eq!(code(&noir(p, &["validate", "missing.noir"])), 2);
}

#[test]
fn run_writes_rows_and_is_byte_identical() {
    let dir = four_road_setup(10, 4.0);
    let p = dir.path();
    for out_dir in ["a", "b"] {
        let out = noir(p, &["run", "run.cfg", "-o", out_dir]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in ["trace.csv", "summary.txt", "config.txt"] {
        let a = fs::read(p.join("a").join(name)).unwrap();
        let b = fs::read(p.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
    let csv = fs::read_to_string(p.join("a/trace.csv")).unwrap();
    let controls = |kind: &str, road: &str| {
        csv.lines()
            .filter(|l| {
                let f: Vec<&str> = l.split(',').collect();
                f[1] == road && f[2] == kind
            })
            .count()
    };
    assert_eq!(controls("inflow_u", "1"), 10);
    assert_eq!(controls("outflow_v", "2"), 10);
}

#[test]
fn infeasible_run_names_the_step() {
    let dir = four_road_setup(10, 1000.0);
    let out = noir(dir.path(), &["run", "run.cfg", "-o", "out"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("step 1"), "{}", stderr(&out));
}

#[test]
fn bad_config_and_missing_config() {
    let dir = four_road_setup(10, 4.0);
    let p = dir.path();
    fs::write(p.join("typo.cfg"), "[network]\nfile = four.noir\n[mpc]\nbta = 1\n").unwrap();
    let out = noir(p, &["run", "typo.cfg", "-o", "out"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 4"));
    assert_eq!(code(&noir(p, &["run", "nope.cfg", "-o", "out"])), 2);
}

#[test]
fn sweep_matches_run_and_merges() {
    let dir = four_road_setup(10, 4.0);
    let p = dir.path();
    assert_eq!(code(&noir(p, &["run", "run.cfg", "-o", "single"])), 0);
    let out = noir(p, &["sweep", "run.cfg", "--beta", "0,0.5,1", "-o", "sw"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(p.join("single/trace.csv")).unwrap(),
        fs::read(p.join("sw/beta_0/trace.csv")).unwrap()
    );
    for b in ["beta_0.5", "beta_1"] {
        assert!(p.join("sw").join(b).join("trace.csv").is_file());
    }
    let merged = fs::read_to_string(p.join("sw/comparison.csv")).unwrap();
    let single = fs::read_to_string(p.join("single/trace.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 3 * (single.lines().count() - 1));
    assert!(merged.starts_with("beta,k,road_or_flow_id,kind,value\n"));
    let sweep = fs::read_to_string(p.join("sw/sweep.txt")).unwrap();
    assert!(sweep.contains("seed = 5"));

    assert_ne!(code(&noir(p, &["sweep", "run.cfg", "-o", "x"])), 0);
    assert_ne!(code(&noir(p, &["sweep", "run.cfg", "--beta", "", "-o", "x"])), 0);
}

#[test]
fn report_one_plot_per_beta_per_family() {
    let dir = four_road_setup(12, 4.0);
    let p = dir.path();
    assert_eq!(code(&noir(p, &["sweep", "run.cfg", "--beta", "0,1", "-o", "sw"])), 0);
    let out = noir(p, &["report", "sw"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for b in ["beta_0", "beta_1"] {
        for f in ["boundary_flows.svg", "densities.svg", "aggregate.svg"] {
            let svg = fs::read_to_string(p.join("sw").join(b).join(f)).unwrap();
            assert!(svg.starts_with("<svg"));
        }
    }
}

#[test]
fn report_rejects_malformed_trace_with_line() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::create_dir(p.join("run")).unwrap();
    fs::write(
        p.join("run/trace.csv"),
        "k,road_or_flow_id,kind,value\n0,3,density,1\n1,3,density,oops\n",
    )
    .unwrap();
    let out = noir(p, &["report", "run"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
    assert_eq!(code(&noir(p, &["report", "empty"])), 2);
}
