//! Static SVG time-series plots of a parsed trace.
//!
//! Output depends only on the input numbers (fixed canvas, fixed two-decimal
//! coordinates), so the same trace always yields the same bytes.

use std::fmt::Write as _;

use crate::sim::detect_steady_state;
use crate::trace::{steady_window, Kind, SeriesId, TraceTable, STEADY_TOL};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Vertical marker at this x, with its label.
    pub marker: Option<(f64, String)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick spacing of 1, 2 or 5 times a power of ten giving about `n` ticks.
fn nice_step(span: f64, n: usize) -> f64 {
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0".into()
    } else {
        s
    }
}

pub fn render(chart: &Chart) -> String {
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let pts = || chart.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(pts().map(|p| p.0).chain(chart.marker.iter().map(|m| m.0)));
    let (y0, y1) = range(pts().map(|p| p.1));
    let (xs, ys) = (nice_step(x1 - x0, 8), nice_step(y1 - y0, 6));
    let (x0, x1) = ((x0 / xs).floor() * xs, (x1 / xs).ceil() * xs);
    let (y0, y1) = ((y0 / ys).floor() * ys, (y1 / ys).ceil() * ys);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(o, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        o,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&chart.title)
    );

    // grid and ticks
    let n_x = ((x1 - x0) / xs).round() as i64;
    for t in 0..=n_x {
        let x = x0 + t as f64 * xs;
        let px = sx(x);
        let _ = writeln!(
            o,
            r##"<line x1="{px:.2}" y1="{TOP:.2}" x2="{px:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##,
            TOP + ph
        );
        let _ = writeln!(
            o,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            tick_label(x, xs)
        );
    }
    let n_y = ((y1 - y0) / ys).round() as i64;
    for t in 0..=n_y {
        let y = y0 + t as f64 * ys;
        let py = sy(y);
        let _ = writeln!(
            o,
            r##"<line x1="{LEFT:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e5e5e5"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py + 4.0,
            tick_label(y, ys)
        );
    }
    let _ = writeln!(
        o,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        o,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        o,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&chart.y_label)
    );

    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(path, "{}{:.2},{:.2}", if j == 0 { "" } else { " " }, sx(x), sy(y));
        }
        let _ = writeln!(
            o,
            r#"<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        );
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            o,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }

    if let Some((x, label)) = &chart.marker {
        let px = sx(*x);
        let _ = writeln!(
            o,
            r#"<line x1="{px:.2}" y1="{TOP:.2}" x2="{px:.2}" y2="{:.2}" stroke="black" stroke-dasharray="5,4"/>"#,
            TOP + ph
        );
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            px + 4.0,
            TOP + 14.0,
            escape(label)
        );
    }
    o.push_str("</svg>\n");
    o
}

/// Roads drawn in the per-road figures.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    pub inlets: Vec<usize>,
    pub outlets: Vec<usize>,
    pub interior: Vec<usize>,
}

impl Selection {
    /// Lowest two road numbers of each class present in the trace.
    pub fn lowest_two(table: &TraceTable) -> Selection {
        let two = |kind| table.roads(kind).into_iter().take(2).collect();
        Selection {
            inlets: two(Kind::InflowU),
            outlets: two(Kind::OutflowV),
            interior: two(Kind::Density),
        }
    }
}

fn to_points(series: &[(usize, f64)]) -> Vec<(f64, f64)> {
    series.iter().map(|&(k, v)| (k as f64, v)).collect()
}

fn road_series(table: &TraceTable, kind: Kind, roads: &[usize], label: &str) -> Vec<Series> {
    roads
        .iter()
        .map(|&r| Series {
            label: format!("{label} {r}"),
            points: to_points(table.series(kind, SeriesId::Road(r))),
        })
        .collect()
}

/// Steady-state index of the trace's aggregate flows.
pub fn steady_state_of(table: &TraceTable) -> Option<usize> {
    let su: Vec<f64> = table.aggregate(Kind::RhoSumU).iter().map(|p| p.1).collect();
    let sv: Vec<f64> = table.aggregate(Kind::RhoSumV).iter().map(|p| p.1).collect();
    let first = table.aggregate(Kind::RhoSumU).first().map_or(1, |p| p.0);
    detect_steady_state(&su, &sv, steady_window(su.len().min(sv.len())), STEADY_TOL)
        .map(|i| i - 1 + first)
}

/// The three figure families, keyed by file name.
pub fn figures(table: &TraceTable, sel: &Selection) -> Vec<(&'static str, String)> {
    let mut flows = road_series(table, Kind::InflowU, &sel.inlets, "u, inlet");
    flows.extend(road_series(table, Kind::OutflowV, &sel.outlets, "v, outlet"));
    let boundary = Chart {
        title: "External traffic flows".into(),
        x_label: "k".into(),
        y_label: "vehicles per step".into(),
        series: flows,
        marker: None,
    };
    let densities = Chart {
        title: "Interior traffic densities".into(),
        x_label: "k".into(),
        y_label: "vehicles".into(),
        series: road_series(table, Kind::Density, &sel.interior, "road"),
        marker: None,
    };
    let aggregate = Chart {
        title: "External traffic inflow and outflow of the NOIR".into(),
        x_label: "k".into(),
        y_label: "vehicles per step".into(),
        series: vec![
            Series {
                label: "Σu".into(),
                points: to_points(table.aggregate(Kind::RhoSumU)),
            },
            Series {
                label: "Σv".into(),
                points: to_points(table.aggregate(Kind::RhoSumV)),
            },
        ],
        marker: steady_state_of(table).map(|k| (k as f64, format!("steady k={k}"))),
    };
    vec![
        ("boundary_flows.svg", render(&boundary)),
        ("densities.svg", render(&densities)),
        ("aggregate.svg", render(&aggregate)),
    ]
}
