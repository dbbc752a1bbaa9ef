//! Minimal SVG figures: loss curves, trajectory overlays and score bars.

use std::fmt::Write as _;
use std::path::Path;

use crate::env::MazeLayout;
use crate::error::{Error, Result};

use super::Comparison;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Moving average over a trailing window (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// One smoothed line per named series, log-scaled y axis.
pub fn loss_curves_svg(series: &[(String, Vec<f64>)], smoothing: usize) -> Result<String> {
    let smoothed: Vec<(&str, Vec<f64>)> = series
        .iter()
        .map(|(n, v)| (n.as_str(), moving_average(v, smoothing)))
        .collect();
    let finite = smoothed
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite() && *v > 0.0);
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Err(Error::validation("no positive finite losses to plot"));
    }
    let (ly0, ly1) = (lo.log10(), (hi.log10()).max(lo.log10() + 1e-3));
    let n_max = smoothed.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let px = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n_max - 1) as f64;
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v.log10() - ly0) / (ly1 - ly0);

    let mut s = header(W, H);
    axes(&mut s, "step", "loss (log)");
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>", MARGIN - 4.0, MARGIN + 4.0, hi);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>", MARGIN - 4.0, H - MARGIN, lo);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", W - MARGIN, H - MARGIN + 16.0, n_max);
    for (k, (name, v)) in smoothed.iter().enumerate() {
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite() && **y > 0.0)
            .map(|(i, y)| format!("{:.1},{:.1}", px(i), py(*y)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>", color(k), pts.join(" "));
        legend(&mut s, k, name);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{y}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {y})\">{}</text>",
        escape(ylabel),
        y = H / 2.0
    );
}

fn legend(s: &mut String, k: usize, name: &str) {
    let y = MARGIN + 16.0 * k as f64;
    let x = W - MARGIN - 150.0;
    let _ = writeln!(
        s,
        "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
        y - 9.0,
        color(k),
        x + 14.0,
        y,
        escape(name)
    );
}

/// Maze walls and goal, with each path drawn as a polyline over `(x, y)` positions.
pub fn trajectory_svg(layout: &MazeLayout, paths: &[(String, Vec<[f64; 2]>)]) -> String {
    let cell = 40.0;
    let (w, h) = (layout.cols() as f64 * cell, layout.rows() as f64 * cell);
    let mut s = header(w, h);
    for r in 0..layout.rows() {
        for c in 0..layout.cols() {
            if layout.is_wall(r, c) {
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"#444\"/>",
                    c as f64 * cell,
                    r as f64 * cell
                );
            }
        }
    }
    let g = layout.goal_position();
    let _ = writeln!(
        s,
        "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"{:.1}\" fill=\"#2ca02c\" fill-opacity=\"0.35\"/>",
        g[0] * cell,
        g[1] * cell,
        crate::env::GOAL_RADIUS * cell
    );
    for (k, (name, path)) in paths.iter().enumerate() {
        let pts: Vec<String> = path
            .iter()
            .map(|p| format!("{:.1},{:.1}", p[0] * cell, p[1] * cell))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" stroke-opacity=\"0.8\" points=\"{}\"><title>{}</title></polyline>",
            color(k),
            pts.join(" "),
            escape(name)
        );
        if let Some(p) = path.first() {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{}\"/>", p[0] * cell, p[1] * cell, color(k));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Normalized score per schedule with ±1 standard-error whiskers.
pub fn score_bars_svg(cmp: &Comparison) -> String {
    let rows = &cmp.rows;
    let top = rows
        .iter()
        .map(|r| r.report.normalized_mean + r.report.normalized_se)
        .fold(100.0_f64, f64::max);
    let bottom = rows
        .iter()
        .map(|r| r.report.normalized_mean - r.report.normalized_se)
        .fold(0.0_f64, f64::min);
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - bottom) / (top - bottom);
    let slot = (W - 2.0 * MARGIN) / rows.len().max(1) as f64;
    let mut s = header(W, H);
    axes(&mut s, "schedule", "normalized score");
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{y:.1}\" x2=\"{r}\" y2=\"{y:.1}\" stroke=\"#999\" stroke-dasharray=\"4\"/>", m = MARGIN, r = W - MARGIN, y = py(100.0));
    for (k, r) in rows.iter().enumerate() {
        let x = MARGIN + slot * k as f64 + slot * 0.2;
        let bw = slot * 0.6;
        let m = r.report.normalized_mean;
        let (y0, y1) = (py(m.max(0.0)), py(m.min(0.0)));
        let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{y0:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{}\"/>", y1 - y0, color(k));
        let cx = x + bw / 2.0;
        let se = r.report.normalized_se;
        let _ = writeln!(s, "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", py(m - se), py(m + se));
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", H - MARGIN + 16.0, escape(&r.name));
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{m:.1}</text>", py(m + se) - 4.0);
    }
    s.push_str("</svg>\n");
    s
}
