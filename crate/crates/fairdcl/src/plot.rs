//! Minimal dependency-free SVG charts: line charts for bias traces and
//! loss curves, bar charts for per-stage probe accuracy and grouped IoU.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{FairdclError, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Optional (lower, upper) band per point, e.g. mean ± std.
    pub band: Option<Vec<(f64, f64)>>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
            band: None,
        }
    }
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + 1e-9 * step {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_lo) / (self.x_hi - self.x_lo).max(1e-12) * (WIDTH - MARGIN_L - MARGIN_R)
    }
    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B
            - (y - self.y_lo) / (self.y_hi - self.y_lo).max(1e-12) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn svg_header(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"13\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        WIDTH / 2.0,
        esc(title),
        WIDTH / 2.0,
        HEIGHT - 12.0,
        esc(xlabel),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        esc(ylabel),
    );
    s
}

fn axes_and_ticks(s: &mut String, frame: &Frame) {
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = write!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for t in nice_ticks(frame.x_lo, frame.x_hi) {
        let px = frame.px(t);
        let _ = write!(
            s,
            "<line x1=\"{px}\" y1=\"{y0}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 5.0,
            y0 + 20.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(frame.y_lo, frame.y_hi) {
        let py = frame.py(t);
        let _ = write!(
            s,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{x0}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0,
            fmt_tick(t)
        );
    }
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN_T + 8.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN_R - 150.0;
        let _ = write!(
            s,
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            x + 22.0,
            PALETTE[i % PALETTE.len()],
            x + 28.0,
            y + 4.0,
            esc(label)
        );
    }
}

/// Multi-series line chart with optional shaded bands.
pub fn line_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series],
    path: &Path,
) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(FairdclError::Config("line chart needs non-empty series".into()));
    }
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
        if let Some(band) = &s.band {
            for &(lo, hi) in band {
                y_lo = y_lo.min(lo);
                y_hi = y_hi.max(hi);
            }
        }
    }
    if y_hi == y_lo {
        y_hi += 1.0;
        y_lo -= 1.0;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let frame = Frame {
        x_lo,
        x_hi,
        y_lo: y_lo - pad,
        y_hi: y_hi + pad,
    };
    let mut svg = svg_header(title, xlabel, ylabel);
    axes_and_ticks(&mut svg, &frame);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &s.band {
            let mut pts = String::new();
            for (&(x, _), &(lo, _)) in s.points.iter().zip(band) {
                let _ = write!(pts, "{:.2},{:.2} ", frame.px(x), frame.py(lo));
            }
            for (&(x, _), &(_, hi)) in s.points.iter().zip(band).rev() {
                let _ = write!(pts, "{:.2},{:.2} ", frame.px(x), frame.py(hi));
            }
            let _ = write!(
                svg,
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
                pts.trim_end()
            );
        }
        let mut pts = String::new();
        for &(x, y) in &s.points {
            let _ = write!(pts, "{:.2},{:.2} ", frame.px(x), frame.py(y));
        }
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.trim_end()
        );
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Grouped bar chart: one cluster per category, one bar per series.
pub fn bar_chart(
    title: &str,
    ylabel: &str,
    categories: &[&str],
    series: &[(&str, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    if categories.is_empty() || series.is_empty() {
        return Err(FairdclError::Config("bar chart needs categories and series".into()));
    }
    for (_, vals) in series {
        if vals.len() != categories.len() {
            return Err(FairdclError::Config(
                "bar chart series length must match category count".into(),
            ));
        }
    }
    let y_hi = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let frame = Frame {
        x_lo: 0.0,
        x_hi: categories.len() as f64,
        y_lo: 0.0,
        y_hi,
    };
    let mut svg = svg_header(title, "", ylabel);
    axes_and_ticks(&mut svg, &frame);
    let cluster_w = (WIDTH - MARGIN_L - MARGIN_R) / categories.len() as f64;
    let bar_w = cluster_w * 0.8 / series.len() as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let cx = MARGIN_L + cluster_w * (ci as f64 + 0.5);
        let _ = write!(
            svg,
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 20.0,
            esc(cat)
        );
        for (si, (_, vals)) in series.iter().enumerate() {
            let x = cx - cluster_w * 0.4 + bar_w * si as f64;
            let top = frame.py(vals[ci]);
            let _ = write!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{top:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
                (HEIGHT - MARGIN_B - top).max(0.0),
                PALETTE[si % PALETTE.len()]
            );
        }
    }
    let labels: Vec<&str> = series.iter().map(|(l, _)| *l).collect();
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
