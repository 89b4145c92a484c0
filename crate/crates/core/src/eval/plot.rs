//! Minimal deterministic SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const WIDTH: f64 = 960.0;
const PANEL_HEIGHT: f64 = 240.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 30.0;

pub const TRUTH_COLOR: &str = "#FFAA6B";
pub const ADAPT_COLOR: &str = "#EB3324";
pub const GEN_COLOR: &str = "#2F6FD0";

pub struct Series<'a> {
    pub name: &'a str,
    /// `(x, y)` pairs; non-finite points are skipped.
    pub points: Vec<(f64, f64)>,
    pub color: &'a str,
    pub stroke_width: f64,
    pub opacity: f64,
}

pub struct Panel<'a> {
    pub title: String,
    pub x_label: &'a str,
    pub series: Vec<Series<'a>>,
}

fn bounds(panel: &Panel) -> (f64, f64, f64, f64) {
    let pts = panel
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, -1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    (x0, x1, y0 - pad, y1 + pad)
}

/// Stacks `panels` vertically into one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let height = panels.len().max(1) as f64 * PANEL_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, panel) in panels.iter().enumerate() {
        let top = k as f64 * PANEL_HEIGHT + MARGIN_TOP;
        let bottom = (k + 1) as f64 * PANEL_HEIGHT - MARGIN_BOTTOM;
        let (left, right) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
        let (x0, x1, y0, y1) = bounds(panel);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
        let _ = writeln!(
            s,
            r##"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
            right - left,
            bottom - top
        );
        let _ = writeln!(s, r#"<text x="{left:.1}" y="{:.1}">{}</text>"#, top - 8.0, escape(&panel.title));
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">{}</text>"#, top + 10.0, fmt_tick(y1));
        let _ = writeln!(s, r#"<text x="4" y="{bottom:.1}">{}</text>"#, fmt_tick(y0));
        let _ = writeln!(s, r#"<text x="{left:.1}" y="{:.1}">{}</text>"#, bottom + 14.0, fmt_tick(x0));
        let _ = writeln!(
            s,
            r#"<text x="{right:.1}" y="{:.1}" text-anchor="end">{} {}</text>"#,
            bottom + 14.0,
            escape(panel.x_label),
            fmt_tick(x1)
        );
        let mut legend_x = left + 220.0;
        for series in &panel.series {
            let _ = writeln!(
                s,
                r#"<text x="{legend_x:.1}" y="{:.1}" fill="{}">{}</text>"#,
                top - 8.0,
                series.color,
                escape(series.name)
            );
            legend_x += 12.0 + 7.0 * series.name.len() as f64;
            let mut path = String::new();
            for &(x, y) in series.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                let _ = write!(path, "{:.2},{:.2} ", sx(x), sy(y));
            }
            if path.is_empty() {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="{}" stroke-opacity="{}" stroke-linejoin="round" points="{}"/>"#,
                series.color,
                series.stroke_width,
                series.opacity,
                path.trim_end()
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Ground truth over the whole stream as a wide band, adaptation predictions
/// over the first `adapt.rows()` samples and generalization predictions over
/// the rest. One SVG per output column, written to `path_for(dim)`.
pub fn plot_overlay(
    truth: &Tensor,
    adapt: &Tensor,
    generalization: &Tensor,
    dim_names: &[&str],
    mut path_for: impl FnMut(usize) -> std::path::PathBuf,
) -> Result<Vec<std::path::PathBuf>> {
    let n_adapt = adapt.rows();
    if n_adapt + generalization.rows() != truth.rows() {
        return Err(Error::shape(
            "plot_overlay rows",
            truth.rows(),
            format!("{} + {}", n_adapt, generalization.rows()),
        ));
    }
    let d = truth.cols();
    if adapt.cols() != d || (generalization.rows() > 0 && generalization.cols() != d) || dim_names.len() != d {
        return Err(Error::shape("plot_overlay columns", d, format!("{} / {}", adapt.cols(), generalization.cols())));
    }
    let mut written = Vec::with_capacity(d);
    for k in 0..d {
        let mut series = vec![Series {
            name: "ground truth",
            points: (0..truth.rows()).map(|i| (i as f64, truth.get(i, k))).collect(),
            color: TRUTH_COLOR,
            stroke_width: 6.0,
            opacity: 0.45,
        }];
        series.push(Series {
            name: "adaptation",
            points: (0..n_adapt).map(|i| (i as f64, adapt.get(i, k))).collect(),
            color: ADAPT_COLOR,
            stroke_width: 1.2,
            opacity: 1.0,
        });
        if generalization.rows() > 0 {
            series.push(Series {
                name: "generalization",
                points: (0..generalization.rows())
                    .map(|i| ((n_adapt + i) as f64, generalization.get(i, k)))
                    .collect(),
                color: GEN_COLOR,
                stroke_width: 1.2,
                opacity: 1.0,
            });
        }
        let panel = Panel {
            title: dim_names[k].to_string(),
            x_label: "sample",
            series,
        };
        let path = path_for(k);
        write_text(&path, &render(&[panel]))?;
        written.push(path);
    }
    Ok(written)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
