//! Static SVG rendering of curve overlays and forest plots.
//!
//! Output depends only on the input data: the image size, palette, fonts and
//! coordinate precision are fixed, so identical input gives identical bytes.

use std::fmt::Write;

use thiserror::Error;

use crate::estimators::CurveEstimate;
use crate::meta::{ForestRowKind, ForestTable};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlotError {
    #[error("nothing to plot")]
    EmptyTable,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One line of a curve plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Draw as a right-continuous step function rather than joining points.
    pub step: bool,
    pub dashed: bool,
}

impl Series {
    /// A step series starting from the curve's initial value at time 0.
    pub fn from_estimate(label: impl Into<String>, c: &CurveEstimate) -> Self {
        let mut points = vec![(0.0, c.initial_value())];
        points.extend(c.points.iter().map(|p| (p.time, p.value)));
        if c.horizon > points.last().map_or(0.0, |p| p.0) {
            let v = points.last().map_or(c.initial_value(), |p| p.1);
            points.push((c.horizon, v));
        }
        Series {
            label: label.into(),
            points,
            step: true,
            dashed: false,
        }
    }

    /// A smooth series through the curve's points, drawn dashed.
    pub fn from_theory(label: impl Into<String>, c: &CurveEstimate) -> Self {
        Series {
            label: label.into(),
            points: c.points.iter().map(|p| (p.time, p.value)).collect(),
            step: false,
            dashed: true,
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" { "0.00".to_string() } else { s }
}

/// Roughly five round tick values covering `[lo, hi]`.
fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![lo];
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn tick_label(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{t}</text>\n",
        w = WIDTH,
        h = HEIGHT,
        tx = num((LEFT + WIDTH - RIGHT) / 2.0),
        t = esc(title)
    );
}

/// Overlays several curves on shared axes with a legend on the right.
pub fn curves_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String, PlotError> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for &(x, y) in pts {
        any = true;
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !any {
        return Err(PlotError::EmptyTable);
    }
    x0 = x0.min(0.0);
    y0 = y0.min(0.0);
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, pw, ph);
    for t in nice_ticks(x0, x1) {
        let x = num(sx(t));
        let _ = writeln!(
            out,
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b5}\" stroke=\"black\"/><text x=\"{x}\" y=\"{b18}\" text-anchor=\"middle\">{l}</text>",
            b = num(TOP + ph),
            b5 = num(TOP + ph + 5.0),
            b18 = num(TOP + ph + 18.0),
            l = tick_label(t)
        );
    }
    for t in nice_ticks(y0, y1) {
        let y = num(sy(t));
        let _ = writeln!(
            out,
            "<line x1=\"{l5}\" y1=\"{y}\" x2=\"{l}\" y2=\"{y}\" stroke=\"black\"/><text x=\"{l8}\" y=\"{y}\" text-anchor=\"end\" dominant-baseline=\"middle\">{lab}</text>",
            l = num(LEFT),
            l5 = num(LEFT - 5.0),
            l8 = num(LEFT - 8.0),
            lab = tick_label(t)
        );
    }
    axis_labels(&mut out, x_label, y_label, ph);

    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut coords: Vec<(f64, f64)> = Vec::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            if s.step && j > 0 {
                coords.push((x, s.points[j - 1].1));
            }
            coords.push((x, y));
        }
        let path: Vec<String> = coords.iter().map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y)))).collect();
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"{dash} points=\"{}\"/>",
            path.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{colour}\" stroke-width=\"2\"{dash}/><text x=\"{}\" y=\"{y}\" dominant-baseline=\"middle\">{}</text>",
            num(lx),
            num(lx + 25.0),
            num(lx + 30.0),
            esc(&s.label),
            y = num(ly)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn axes(out: &mut String, pw: f64, ph: f64) {
    let _ = writeln!(
        out,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        num(LEFT),
        num(TOP),
        num(pw),
        num(ph)
    );
}

fn axis_labels(out: &mut String, x_label: &str, y_label: &str, ph: f64) {
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        num((LEFT + WIDTH - RIGHT) / 2.0),
        num(HEIGHT - 15.0),
        esc(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"18\" y=\"{c}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {c})\">{}</text>",
        esc(y_label),
        c = num(TOP + ph / 2.0)
    );
}

/// Forest plot of ratios on a log axis, one point-and-whisker glyph per row.
/// Combined rows are drawn as diamonds.
pub fn forest_svg(title: &str, table: &ForestTable) -> Result<String, PlotError> {
    let rows: Vec<_> = table
        .rows
        .iter()
        .filter(|r| r.log_lo.is_finite() && r.log_hi.is_finite() && r.log_effect.is_finite())
        .collect();
    if rows.is_empty() {
        return Err(PlotError::EmptyTable);
    }
    let lo = rows.iter().map(|r| r.log_lo).fold(0.0, f64::min);
    let hi = rows.iter().map(|r| r.log_hi).fold(0.0, f64::max);
    let pad = 0.05 * (hi - lo).max(0.1);
    let (l0, l1) = (lo - pad, hi + pad);
    let plot_left = 230.0;
    let plot_right = WIDTH - 150.0;
    let pw = plot_right - plot_left;
    let row_h = ((HEIGHT - TOP - BOTTOM) / rows.len() as f64).min(40.0);
    let sx = |l: f64| plot_left + (l - l0) / (l1 - l0) * pw;
    let bottom = TOP + row_h * rows.len() as f64;

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"grey\" stroke-dasharray=\"4 3\"/>",
        num(TOP),
        num(bottom),
        x = num(sx(0.0))
    );
    let _ = writeln!(
        out,
        "<line x1=\"{}\" y1=\"{b}\" x2=\"{}\" y2=\"{b}\" stroke=\"black\"/>",
        num(plot_left),
        num(plot_right),
        b = num(bottom)
    );
    for t in log_ticks(l0, l1) {
        let x = num(sx(t.ln()));
        let _ = writeln!(
            out,
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b5}\" stroke=\"black\"/><text x=\"{x}\" y=\"{b18}\" text-anchor=\"middle\">{l}</text>",
            b = num(bottom),
            b5 = num(bottom + 5.0),
            b18 = num(bottom + 18.0),
            l = tick_label(t)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">ratio (log scale)</text>",
        num((plot_left + plot_right) / 2.0),
        num(bottom + 38.0)
    );

    for (i, r) in rows.iter().enumerate() {
        let y = TOP + row_h * (i as f64 + 0.5);
        let (a, b, m) = (sx(r.log_lo), sx(r.log_hi), sx(r.log_effect));
        let (rlo, rhi) = r.ratio_interval();
        let _ = writeln!(out, "<g class=\"row\">");
        let _ = writeln!(
            out,
            "<text x=\"10\" y=\"{yy}\" dominant-baseline=\"middle\">{}</text>",
            esc(&r.label),
            yy = num(y)
        );
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"black\"/>",
            num(a),
            num(b),
            yy = num(y)
        );
        match r.kind {
            ForestRowKind::Study => {
                let _ = writeln!(
                    out,
                    "<rect x=\"{}\" y=\"{}\" width=\"8\" height=\"8\" fill=\"black\"/>",
                    num(m - 4.0),
                    num(y - 4.0)
                );
            }
            ForestRowKind::Combined => {
                let _ = writeln!(
                    out,
                    "<polygon points=\"{},{} {},{} {},{} {},{}\" fill=\"{}\"/>",
                    num(m - 7.0),
                    num(y),
                    num(m),
                    num(y - 6.0),
                    num(m + 7.0),
                    num(y),
                    num(m),
                    num(y + 6.0),
                    PALETTE[0]
                );
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{yy}\" dominant-baseline=\"middle\">{:.2} [{:.2}, {:.2}]</text>",
            num(plot_right + 10.0),
            r.ratio(),
            rlo,
            rhi,
            yy = num(y)
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Ratios of the form 1, 2, 5 times a power of ten inside `[exp(l0), exp(l1)]`.
fn log_ticks(l0: f64, l1: f64) -> Vec<f64> {
    let (a, b) = (l0.exp(), l1.exp());
    let mut out = Vec::new();
    let mut p = 10f64.powf(a.log10().floor());
    while p <= b * (1.0 + 1e-12) {
        for m in [1.0, 2.0, 5.0] {
            let t = m * p;
            if t >= a * (1.0 - 1e-12) && t <= b * (1.0 + 1e-12) {
                out.push(t);
            }
        }
        p *= 10.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::HazardPair;
    use crate::meta::{fixed_effect, forest_data, knapp_hartung_modified, synthetic_two_study_fixture};
    use crate::simulate::{linear_grid, theoretical_cif};

    fn crossing_series() -> Vec<Series> {
        let grid = linear_grid(300.0, 101);
        [(0.02, 0.02), (0.01, 0.005)]
            .iter()
            .enumerate()
            .map(|(i, &(a, c))| {
                let curve = theoretical_cif(HazardPair::new(a, c).unwrap(), &grid).unwrap();
                Series::from_theory(format!("group {i}"), &curve)
            })
            .collect()
    }

    #[test]
    fn flat_curve_renders_one_polyline() {
        let s = Series {
            label: "flat".into(),
            points: vec![(0.0, 0.0), (10.0, 0.0)],
            step: true,
            dashed: false,
        };
        let svg = curves_svg("t", "x", "y", &[s]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn crossing_curves_have_legend_and_are_deterministic() {
        let a = curves_svg("CIF", "days", "probability", &crossing_series()).unwrap();
        let b = curves_svg("CIF", "days", "probability", &crossing_series()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains(">group 0</text>") && a.contains(">group 1</text>"));
    }

    #[test]
    fn forest_has_one_glyph_per_row() {
        let s = synthetic_two_study_fixture();
        let res = vec![
            fixed_effect(&s).unwrap(),
            knapp_hartung_modified(&s).unwrap(),
            fixed_effect(&s).unwrap(),
            fixed_effect(&s).unwrap(),
        ];
        let svg = forest_svg("forest", &forest_data(&s, &res)).unwrap();
        assert_eq!(svg.matches("<g class=\"row\">").count(), 6);
        assert_eq!(svg.matches("<rect x=").count() + svg.matches("<polygon").count(), 6);
        assert!(svg.contains(">1</text>"));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(curves_svg("t", "x", "y", &[]), Err(PlotError::EmptyTable));
        assert_eq!(forest_svg("t", &ForestTable { rows: vec![] }), Err(PlotError::EmptyTable));
    }

    #[test]
    fn labels_are_escaped() {
        let s = Series {
            label: "a<b & c".into(),
            points: vec![(0.0, 1.0), (1.0, 0.5)],
            step: false,
            dashed: false,
        };
        let svg = curves_svg("t", "x", "y", &[s]).unwrap();
        assert!(svg.contains("a&lt;b &amp; c"));
    }

    #[test]
    fn tick_helpers() {
        assert_eq!(nice_ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(log_ticks(0.5f64.ln(), 20f64.ln()), vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0]);
    }
}
