//! The `plot` command and a minimal SVG line-chart emitter.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bapo_core::metrics::{parse_csv, CSV_COLUMNS};
use bapo_core::MetricsRow;

use crate::error::{CliError, CliResult};
use crate::manifest::write_file;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Columns that can be plotted: every numeric metrics column.
pub fn plottable_columns() -> Vec<&'static str> {
    CSV_COLUMNS.iter().copied().filter(|c| *c != "bound_search").collect()
}

/// `step + epoch / updates_per_step`, so epochs of one step spread over `[step, step + 1)`.
fn x_positions(rows: &[MetricsRow]) -> Vec<f64> {
    let per_step = rows.iter().map(|r| r.epoch).max().map_or(1, |m| m + 1) as f64;
    rows.iter().map(|r| r.step as f64 + r.epoch as f64 / per_step).collect()
}

pub fn series_for(label: &str, rows: &[MetricsRow], column: &str) -> Series {
    let xs = x_positions(rows);
    let points = rows
        .iter()
        .zip(xs)
        .filter_map(|(r, x)| r.column(column).filter(|y| y.is_finite()).map(|y| (x, y)))
        .collect();
    Series {
        label: label.to_string(),
        points,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Renders a line chart. Output depends only on the inputs.
pub fn render_svg(series: &[Series], x_label: &str, y_label: &str) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<g stroke="black" fill="none"><line x1="{LEFT}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b:.2}"/></g>"#,
        b = TOP + ph,
        r = LEFT + pw
    );
    for i in 0..=TICKS {
        let t = i as f64 / TICKS as f64;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{b:.2}" x2="{px:.2}" y2="{b2:.2}" stroke="black"/><text x="{px:.2}" y="{ty:.2}" text-anchor="middle">{}</text>"#,
            tick_label(xv),
            b = TOP + ph,
            b2 = TOP + ph + 5.0,
            ty = TOP + ph + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{l2:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{tx:.2}" y="{ty:.2}" text-anchor="end">{}</text>"#,
            tick_label(yv),
            l2 = LEFT - 5.0,
            tx = LEFT - 8.0,
            ty = py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y:.2}" text-anchor="middle" transform="rotate(-90 16 {y:.2})">{}</text>"#,
        escape(y_label),
        y = TOP + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn read_rows(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_csv(&text).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

/// One series per `(file, column)`, plotted against step.
pub fn cmd_plot(csv_paths: &[PathBuf], columns: &[String], out_svg: &Path) -> CliResult<()> {
    let available = plottable_columns();
    if columns.is_empty() {
        return Err(CliError::Usage(format!(
            "no column given; available: {}",
            available.join(", ")
        )));
    }
    for c in columns {
        if !available.contains(&c.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown column {c:?}; available: {}",
                available.join(", ")
            )));
        }
    }
    if csv_paths.is_empty() {
        return Err(CliError::Usage("no CSV files given".into()));
    }
    let mut series = Vec::new();
    for path in csv_paths {
        let rows = read_rows(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for c in columns {
            let label = if columns.len() == 1 {
                stem.clone()
            } else {
                format!("{stem}:{c}")
            };
            series.push(series_for(&label, &rows, c));
        }
    }
    if let Some(parent) = out_svg.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::manifest::ensure_dir(parent)?;
    }
    write_file(out_svg, &render_svg(&series, "step", &columns.join(", ")))
}
