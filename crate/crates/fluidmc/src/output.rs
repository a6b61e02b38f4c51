//! Deterministic output formatting: `%.10g` floats, CSV writers for
//! trajectories, estimates, signals and check results, the run manifest, and
//! a static SVG line chart. Identical inputs produce identical bytes.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::csl::BooleanSignal;
use crate::fluid::FluidTrajectory;
use crate::sim::EnsembleEstimate;

/// C `%.10g`: ten significant digits, trailing zeros stripped, scientific
/// notation when the decimal exponent is below -4 or at least 10.
pub fn fmt_g10(v: f64) -> String {
    fmt_g(v, 10)
}

fn fmt_g(v: f64, prec: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v < 0.0 { "-inf".into() } else { "inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let p = prec.max(1);
    // Exponent after rounding to p significant digits.
    let sci = format!("{:.*e}", p - 1, v);
    let epos = sci.find('e').expect("exponential format");
    let exp: i32 = sci[epos + 1..].parse().expect("exponent digits");
    if exp < -4 || exp >= p as i32 {
        let mantissa = strip_trailing_zeros(&sci[..epos]);
        format!("{}e{}{:02}", mantissa, if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_trailing_zeros(&format!("{v:.decimals$}"))
    }
}

fn strip_trailing_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// CSV primitives

/// Quotes a field when it contains a delimiter, quote, or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Splits one CSV line honoring double-quoted fields with doubled quotes.
pub fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        if quoted {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    cur.push('"');
                    chars.next();
                } else {
                    quoted = false;
                }
            } else {
                cur.push(c);
            }
        } else {
            match c {
                '"' => quoted = true,
                ',' => fields.push(std::mem::take(&mut cur)),
                _ => cur.push(c),
            }
        }
    }
    fields.push(cur);
    fields
}

/// Parses CSV text with a header row and numeric body, skipping `#` comment
/// lines and blank lines. Ragged or non-numeric rows are rejected.
pub fn parse_numeric_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (_, header_line) = lines.next().ok_or_else(|| "empty CSV".to_string())?;
    let header = split_csv_line(header_line);
    let width = header.len();
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        let fields = split_csv_line(line);
        if fields.len() != width {
            return Err(format!(
                "line {}: expected {} fields, found {}",
                lineno + 1,
                width,
                fields.len()
            ));
        }
        let row: Result<Vec<f64>, _> = fields
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| format!("line {}: `{f}` is not a number", lineno + 1)))
            .collect();
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err("empty CSV".into());
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// CSV writers

/// `t,x_<state>...` rows on the given grid, densities queried from the dense
/// trajectory.
pub fn write_trajectory_csv<W: Write + ?Sized>(
    w: &mut W,
    traj: &FluidTrajectory,
    grid: &[f64],
) -> io::Result<()> {
    write!(w, "t")?;
    for name in traj.names() {
        write!(w, ",x_{name}")?;
    }
    writeln!(w)?;
    for &t in grid {
        write!(w, "{}", fmt_g10(t))?;
        for v in traj.at(t) {
            write!(w, ",{}", fmt_g10(v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `t,mean_<name>...,ci_<name>...`: one estimate per name, all sharing the
/// same grid; the ci columns hold 95% half-widths.
pub fn write_estimator_csv<W: Write + ?Sized>(
    w: &mut W,
    names: &[&str],
    ests: &[EnsembleEstimate],
) -> io::Result<()> {
    assert_eq!(names.len(), ests.len(), "one name per estimate");
    assert!(!ests.is_empty(), "nothing to write");
    let grid = &ests[0].grid;
    for e in ests {
        assert_eq!(&e.grid, grid, "estimates must share the grid");
    }
    write!(w, "t")?;
    for name in names {
        write!(w, ",mean_{name}")?;
    }
    for name in names {
        write!(w, ",ci_{name}")?;
    }
    writeln!(w)?;
    for (k, &t) in grid.iter().enumerate() {
        write!(w, "{}", fmt_g10(t))?;
        for e in ests {
            write!(w, ",{}", fmt_g10(e.mean[k]))?;
        }
        for e in ests {
            write!(w, ",{}", fmt_g10(e.half_width[k]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Piecewise-constant truth intervals as `t_from,t_to,value` rows, preceded
/// by one `# crossing,<t>` comment per threshold crossing; indeterminate
/// intervals come last with value `indeterminate`.
pub fn write_signal_csv<W: Write + ?Sized>(w: &mut W, sig: &BooleanSignal) -> io::Result<()> {
    for &c in &sig.crossings {
        writeln!(w, "# crossing,{}", fmt_g10(c))?;
    }
    writeln!(w, "t_from,t_to,value")?;
    let mut from = 0.0;
    for (k, &v) in sig.values.iter().enumerate() {
        let to = if k < sig.crossings.len() { sig.crossings[k] } else { sig.t_win };
        writeln!(w, "{},{},{}", fmt_g10(from), fmt_g10(to), v)?;
        from = to;
    }
    for &(lo, hi) in &sig.indeterminate {
        writeln!(w, "{},{},indeterminate", fmt_g10(lo), fmt_g10(hi))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Fluid,
    Statistical,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Fluid => write!(f, "fluid"),
            Source::Statistical => write!(f, "statistical"),
        }
    }
}

/// One evaluated property: formulas carry commas, so that field is quoted.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub formula: String,
    pub kind: String,
    /// Initial state name; empty for steady-state queries.
    pub s0: String,
    pub t: Option<f64>,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub source: Source,
}

pub fn write_result_csv<W: Write + ?Sized>(w: &mut W, rows: &[ResultRow]) -> io::Result<()> {
    writeln!(w, "formula,kind,s0,T,value,ci_low,ci_high,source")?;
    let opt = |v: Option<f64>| v.map(fmt_g10).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.formula),
            r.kind,
            r.s0,
            opt(r.t),
            fmt_g10(r.value),
            opt(r.ci_low),
            opt(r.ci_high),
            r.source
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run manifest

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub ms: f64,
}

/// Provenance record written next to every command's output. Timings are
/// wall-clock and therefore the one part of a run that is not bit-stable.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub model_path: String,
    pub model_sha256: String,
    pub formulas: Vec<String>,
    pub config: serde_json::Value,
    pub version: String,
    pub timings_ms: Vec<PhaseTiming>,
}

impl RunManifest {
    pub fn new(command: &str, model_path: &str, model_bytes: &[u8]) -> Self {
        RunManifest {
            command: command.to_string(),
            model_path: model_path.to_string(),
            model_sha256: sha256_hex(model_bytes),
            formulas: Vec::new(),
            config: serde_json::Value::Object(serde_json::Map::new()),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timings_ms: Vec::new(),
        }
    }

    pub fn set_config(&mut self, key: &str, value: serde_json::Value) {
        if let serde_json::Value::Object(map) = &mut self.config {
            map.insert(key.to_string(), value);
        }
    }

    pub fn add_timing(&mut self, phase: &str, seconds: f64) {
        self.timings_ms.push(PhaseTiming { phase: phase.to_string(), ms: seconds.max(0.0) * 1e3 });
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        std::fs::write(path, text)
    }
}

// ---------------------------------------------------------------------------
// SVG line chart

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// SVG stroke-dasharray; empty means solid.
    pub dash: String,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
    "#bcbd22", "#e377c2",
];

const CHART_W: f64 = 840.0;
const CHART_H: f64 = 520.0;
const ML: f64 = 64.0;
const MR: f64 = 16.0;
const MT: f64 = 40.0;
const MB: f64 = 48.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick positions at a 1/2/5 decade step covering `[lo, hi]`.
fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    debug_assert!(span > 0.0 && span.is_finite());
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let mut step = 10.0 * mag;
    for m in [1.0, 2.0, 5.0] {
        if raw <= m * mag {
            step = m * mag;
            break;
        }
    }
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        // Snap near-zero ticks produced by cancellation.
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

/// Fixed-styling static chart; byte-identical output for identical input.
/// Fails when no series contains a finite point.
pub fn render_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String, String> {
    let finite: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect()
        })
        .collect();
    let all = finite.iter().flatten();
    let (mut xlo, mut xhi, mut ylo, mut yhi) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for &(x, y) in all {
        any = true;
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    if !any {
        return Err("no finite data points to plot".into());
    }
    if xhi - xlo <= 0.0 {
        let pad = xlo.abs().max(0.5) * 0.1;
        xlo -= pad;
        xhi += pad;
    }
    if yhi - ylo <= 0.0 {
        let pad = ylo.abs().max(0.5) * 0.1;
        ylo -= pad;
        yhi += pad;
    } else {
        let pad = (yhi - ylo) * 0.04;
        ylo -= pad;
        yhi += pad;
    }
    let px = |x: f64| ML + (x - xlo) / (xhi - xlo) * (CHART_W - ML - MR);
    let py = |y: f64| CHART_H - MB - (y - ylo) / (yhi - ylo) * (CHART_H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"#ffffff\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\" fill=\"#111111\">{}</text>\n",
        (ML + CHART_W - MR) / 2.0,
        xml_escape(title)
    ));

    for t in nice_ticks(xlo, xhi, 7) {
        let x = px(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MT, CHART_H - MB
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\" fill=\"#333333\">{}</text>\n",
            CHART_H - MB + 16.0,
            fmt_g10(t)
        ));
    }
    for t in nice_ticks(ylo, yhi, 6) {
        let y = py(t);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            ML,
            CHART_W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\" fill=\"#333333\">{}</text>\n",
            ML - 6.0,
            y + 4.0,
            fmt_g10(t)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{ML:.2}\" y=\"{MT:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
        CHART_W - ML - MR,
        CHART_H - MT - MB
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" fill=\"#111111\">{}</text>\n",
        (ML + CHART_W - MR) / 2.0,
        CHART_H - 10.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" fill=\"#111111\" \
         transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        (MT + CHART_H - MB) / 2.0,
        (MT + CHART_H - MB) / 2.0,
        xml_escape(y_label)
    ));

    for (i, pts) in finite.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let dash = if series[i].dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{}\"", series[i].dash)
        };
        let coords: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>\n",
            coords.join(" ")
        ));
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MT + 14.0 + 16.0 * i as f64;
        let x0 = CHART_W - MR - 150.0;
        let dash = if s.dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{}\"", s.dash)
        };
        svg.push_str(&format!(
            "<line x1=\"{x0:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>\n",
            x0 + 24.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#111111\">{}</text>\n",
            x0 + 30.0,
            y + 4.0,
            xml_escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
