//! Line plots as hand-written SVG. Output depends only on the input values.

use std::fmt::Write as _;
use std::fs::File;
use std::path::PathBuf;

use super::median;
use crate::error::invalid;
use crate::federation::metrics::{read_metrics, MetricsRow};
use crate::Result;

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 360.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 48.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: vec![],
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        let pad = (lo.abs() * 0.1).max(0.5);
        (lo - pad, hi + pad)
    }
}

fn panel_svg(out: &mut String, p: &Panel, x0: f64) -> Result<()> {
    if p.series.is_empty() {
        return invalid(format!("panel `{}` has no series", p.title));
    }
    for s in &p.series {
        if s.points.is_empty() {
            return invalid(format!("series `{}` is empty", s.label));
        }
        if s.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return invalid(format!("series `{}` has non-finite values", s.label));
        }
    }
    let all = || p.series.iter().flat_map(|s| s.points.iter());
    let (xmin, xmax) = extent(all().map(|q| q.0));
    let (ymin, ymax) = extent(all().map(|q| q.1));
    let left = x0 + MARGIN_L;
    let right = x0 + PANEL_W - MARGIN_R;
    let top = MARGIN_T;
    let bottom = PANEL_H - MARGIN_B;
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * (right - left);
    let sy = |y: f64| bottom - (y - ymin) / (ymax - ymin) * (bottom - top);

    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        (left + right) / 2.0,
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = xmin + f * (xmax - xmin);
        let yv = ymin + f * (ymax - ymin);
        let (x, y) = (sx(xv), sy(yv));
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            bottom + 4.0,
            bottom + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            left - 6.0,
            y + 3.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
        (left + right) / 2.0,
        PANEL_H - 12.0,
        escape(&p.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        x0 + 16.0,
        (top + bottom) / 2.0,
        x0 + 16.0,
        (top + bottom) / 2.0,
        escape(&p.y_label)
    );
    for (i, s) in p.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            right - 120.0,
            ly - 3.0,
            right - 104.0,
            ly - 3.0,
            right - 100.0,
            ly,
            escape(&s.label)
        );
    }
    Ok(())
}

/// Panels side by side in one SVG document.
pub fn render_svg(panels: &[Panel]) -> Result<String> {
    if panels.is_empty() {
        return invalid("nothing to plot");
    }
    let width = PANEL_W * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        panel_svg(&mut out, p, i as f64 * PANEL_W)?;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Accuracy and loss curves, one line per arm at the per-round median over
/// that arm's runs.
pub fn emit_plot(arms: &[(String, Vec<Vec<MetricsRow>>)]) -> Result<String> {
    let mut acc = Panel::new("test accuracy", "round", "mean test accuracy");
    let mut loss = Panel::new("training loss", "round", "cross-entropy");
    for (name, runs) in arms {
        if runs.is_empty() {
            return invalid(format!("arm `{name}` has no runs"));
        }
        if runs.iter().any(Vec::is_empty) {
            return invalid(format!("arm `{name}` has an empty metrics file"));
        }
        let rounds = runs.iter().map(Vec::len).min().unwrap_or(0);
        let at = |i: usize, f: fn(&MetricsRow) -> f64| median(&runs.iter().map(|r| f(&r[i])).collect::<Vec<_>>());
        let x = |i: usize| runs[0][i].round as f64;
        acc.series.push(Series {
            label: name.clone(),
            points: (0..rounds).map(|i| (x(i), at(i, |r| r.mean_test_acc))).collect(),
        });
        loss.series.push(Series {
            label: name.clone(),
            points: (0..rounds).map(|i| (x(i), at(i, |r| r.global_loss))).collect(),
        });
    }
    render_svg(&[acc, loss])
}

/// [`emit_plot`] over metrics CSV files grouped by arm.
pub fn emit_plot_from_csv(arms: &[(String, Vec<PathBuf>)]) -> Result<String> {
    let mut loaded = Vec::with_capacity(arms.len());
    for (name, paths) in arms {
        let mut runs = Vec::with_capacity(paths.len());
        for p in paths {
            let rows = read_metrics(File::open(p)?)?;
            if rows.is_empty() {
                return invalid(format!("{} holds no rounds", p.display()));
            }
            runs.push(rows);
        }
        loaded.push((name.clone(), runs));
    }
    emit_plot(&loaded)
}
