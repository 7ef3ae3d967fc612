//! Hand-written SVG for the four chart shapes. Output depends only on the
//! spec: fixed canvas, fixed color tables, fixed number formatting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write, ReportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    StackedBar,
    Histogram,
    KdeCurve,
    GroupedBar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    /// x positions, used by KDE curves only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub x: Vec<f64>,
    pub values: Vec<f64>,
}

/// Stacked bars: one category per bar, one series per stacked segment
/// (first series at the bottom). Histogram and grouped bars: one category
/// per bin, one series per group. KDE: one series per curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub kind: ChartKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub categories: Vec<String>,
    pub series: Vec<Series>,
}

/// Dark to light; stacked segments for low buckets use the dark end.
const RAMP: &[&str] = &[
    "#08306b", "#08468f", "#0b5ba6", "#1970b6", "#2a83c1", "#3d95cb", "#53a5d4", "#6bb3db",
    "#84c0e1", "#9ccce7", "#b0d6ec", "#c1dff0", "#cfe5f3", "#dae9f5", "#e2eef7", "#e9f2f9",
    "#eff5fb", "#f3f8fc", "#f7fafd", "#fafcfe",
];
const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

fn ramp_color(i: usize, n: usize) -> &'static str {
    if n <= 1 {
        return RAMP[0];
    }
    RAMP[i * (RAMP.len() - 1) / (n - 1)]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn f(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

impl ChartSpec {
    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::InvalidChart(m));
        if self.series.is_empty() {
            return bad("chart has no series".into());
        }
        if self
            .series
            .iter()
            .flat_map(|s| s.values.iter().chain(&s.x))
            .any(|v| !v.is_finite())
        {
            return bad("non-finite value".into());
        }
        match self.kind {
            ChartKind::KdeCurve => {
                for s in &self.series {
                    if s.x.len() != s.values.len() || s.x.len() < 2 {
                        return bad(format!(
                            "curve `{}` needs matching x and y of length >= 2",
                            s.label
                        ));
                    }
                }
            }
            _ => {
                if self.categories.is_empty() {
                    return bad("bar chart has no categories".into());
                }
                for s in &self.series {
                    if s.values.len() != self.categories.len() {
                        return bad(format!(
                            "series `{}` has {} values for {} categories",
                            s.label,
                            s.values.len(),
                            self.categories.len()
                        ));
                    }
                    if s.values.iter().any(|v| *v < 0.0) {
                        return bad(format!("series `{}` has negative bar heights", s.label));
                    }
                }
            }
        }
        if self.kind == ChartKind::StackedBar {
            for (i, c) in self.categories.iter().enumerate() {
                let total: f64 = self.series.iter().map(|s| s.values[i]).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("stacked bar `{c}` sums to {total}, not 1"));
                }
            }
        }
        Ok(())
    }
}

struct Canvas {
    out: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"##
        );
        let _ = writeln!(out, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
        let _ = writeln!(
            out,
            r##"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"##,
            f(W / 2.0),
            esc(title)
        );
        Self { out }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}"/>"##,
            f(x),
            f(y),
            f(w),
            f(h)
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r##"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"##,
            f(x),
            f(y),
            esc(s)
        );
    }

    fn axes(&mut self, x_label: &str, y_label: &str, y_max: f64) {
        let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
        let _ = writeln!(
            self.out,
            r##"<path d="M{} {}V{}H{}" fill="none" stroke="#000000"/>"##,
            f(x0),
            f(y1),
            f(y0),
            f(x1)
        );
        for i in 0..=4 {
            let v = y_max * i as f64 / 4.0;
            let y = y0 - (y0 - y1) * i as f64 / 4.0;
            self.text(x0 - 6.0, y + 4.0, "end", &f(v));
        }
        self.text((x0 + x1) / 2.0, H - 12.0, "middle", x_label);
        let _ = writeln!(
            self.out,
            r##"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"##,
            f((y0 + y1) / 2.0),
            f((y0 + y1) / 2.0),
            esc(y_label)
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        let x = W - RIGHT + 12.0;
        let step = ((H - TOP - BOTTOM) / entries.len().max(1) as f64).min(16.0);
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = TOP + step * i as f64;
            self.rect(x, y, 10.0, step.min(10.0), color);
            self.text(x + 14.0, y + step.min(10.0), "start", label);
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn y_scale(max: f64) -> f64 {
    if max > 0.0 {
        max
    } else {
        1.0
    }
}

/// Render a validated spec to SVG text.
pub fn render_svg(spec: &ChartSpec) -> Result<String, ReportError> {
    spec.validate()?;
    let mut c = Canvas::new(&spec.title);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let base = H - BOTTOM;
    match spec.kind {
        ChartKind::StackedBar => {
            c.axes(&spec.x_label, &spec.y_label, 1.0);
            let n = spec.categories.len() as f64;
            let slot = plot_w / n;
            let bw = slot * 0.7;
            let k = spec.series.len();
            for (i, cat) in spec.categories.iter().enumerate() {
                let x = LEFT + slot * i as f64 + (slot - bw) / 2.0;
                let mut acc = 0.0;
                for (j, s) in spec.series.iter().enumerate() {
                    let v = s.values[i];
                    if v > 0.0 {
                        let top = base - (acc + v) * plot_h;
                        c.rect(x, top, bw, v * plot_h, ramp_color(j, k));
                    }
                    acc += v;
                }
                c.text(x + bw / 2.0, base + 14.0, "middle", cat);
            }
            // Legend lists the top bucket first, matching the stack order.
            let entries: Vec<(String, &str)> = spec
                .series
                .iter()
                .enumerate()
                .rev()
                .map(|(j, s)| (s.label.clone(), ramp_color(j, k)))
                .collect();
            c.legend(&entries);
        }
        ChartKind::Histogram | ChartKind::GroupedBar => {
            let max = y_scale(
                spec.series
                    .iter()
                    .flat_map(|s| s.values.iter().copied())
                    .fold(0.0, f64::max),
            );
            c.axes(&spec.x_label, &spec.y_label, max);
            let n = spec.categories.len() as f64;
            let slot = plot_w / n;
            let groups = spec.series.len() as f64;
            let bw = slot * 0.8 / groups;
            for (i, cat) in spec.categories.iter().enumerate() {
                let x0 = LEFT + slot * i as f64 + slot * 0.1;
                for (j, s) in spec.series.iter().enumerate() {
                    let h = s.values[i] / max * plot_h;
                    c.rect(
                        x0 + bw * j as f64,
                        base - h,
                        bw,
                        h,
                        PALETTE[j % PALETTE.len()],
                    );
                }
                c.text(x0 + slot * 0.4, base + 14.0, "middle", cat);
            }
            if spec.series.len() > 1 || spec.kind == ChartKind::GroupedBar {
                let entries: Vec<(String, &str)> = spec
                    .series
                    .iter()
                    .enumerate()
                    .map(|(j, s)| (s.label.clone(), PALETTE[j % PALETTE.len()]))
                    .collect();
                c.legend(&entries);
            }
        }
        ChartKind::KdeCurve => {
            let xs = spec.series.iter().flat_map(|s| s.x.iter().copied());
            let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
                (a.min(x), b.max(x))
            });
            let span = if hi > lo { hi - lo } else { 1.0 };
            let max = y_scale(
                spec.series
                    .iter()
                    .flat_map(|s| s.values.iter().copied())
                    .fold(0.0, f64::max),
            );
            c.axes(&spec.x_label, &spec.y_label, max);
            for (j, s) in spec.series.iter().enumerate() {
                let mut d = String::new();
                for (i, (x, y)) in s.x.iter().zip(&s.values).enumerate() {
                    let px = LEFT + (x - lo) / span * plot_w;
                    let py = base - y / max * plot_h;
                    let _ = write!(d, "{}{} {}", if i == 0 { "M" } else { "L" }, f(px), f(py));
                }
                let _ = writeln!(
                    c.out,
                    r##"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"##,
                    PALETTE[j % PALETTE.len()]
                );
            }
            c.text(LEFT, base + 14.0, "middle", &f(lo));
            c.text(LEFT + plot_w, base + 14.0, "middle", &f(hi));
            let entries: Vec<(String, &str)> = spec
                .series
                .iter()
                .enumerate()
                .map(|(j, s)| (s.label.clone(), PALETTE[j % PALETTE.len()]))
                .collect();
            c.legend(&entries);
        }
    }
    Ok(c.finish())
}

pub fn emit_svg(spec: &ChartSpec, path: &Path) -> Result<(), ReportError> {
    write(path, render_svg(spec)?.as_bytes())
}
