//! Minimal SVG charts. Output is a pure function of the inputs: fixed
//! canvas, fixed number formatting, no timestamps.

use std::fmt::Write;

use crate::aegan::HistoryRow;
use crate::geometry::PointCloud;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Frame {
        Frame { x: range(xs), y: range(ys) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

/// Padded finite range; `[0, 1]` when there is nothing to show.
fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if lo > hi {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let (xv, yv) = (f.x.0 + s * (f.x.1 - f.x.0), f.y.0 + s * (f.y.1 - f.y.0));
        let (xp, yp) = (f.px(xv), f.py(yv));
        let _ = writeln!(out, r#"<line x1="{xp:.2}" y1="{b}" x2="{xp:.2}" y2="{}" stroke="black"/>"#, b + 4.0);
        let _ = writeln!(out, r#"<text x="{xp:.2}" y="{}" text-anchor="middle">{}</text>"#, b + 18.0, tick(xv));
        let _ = writeln!(out, r#"<line x1="{}" y1="{yp:.2}" x2="{l}" y2="{yp:.2}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, yp + 4.0, tick(yv));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (k, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * k as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

fn coordinate<'a>(series: &'a [(&str, &PointCloud)], k: usize) -> impl Iterator<Item = f64> + 'a {
    series.iter().flat_map(move |(_, c)| c.iter().filter(move |p| p.len() > k).map(move |p| p[k]))
}

/// Scatter of the first two coordinates of each cloud.
pub fn scatter_svg(title: &str, series: &[(&str, &PointCloud)]) -> String {
    let frame = Frame::fit(coordinate(series, 0), coordinate(series, 1));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "x0", "x1");
    for (k, (_, cloud)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.6">"#);
        for p in cloud.iter() {
            let y = if p.len() > 1 { p[1] } else { 0.0 };
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, frame.px(p[0]), frame.py(y));
        }
        out.push_str("</g>\n");
    }
    legend(&mut out, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Polylines over a shared x axis; non-finite values break the line.
pub fn lines_svg(title: &str, xlabel: &str, ylabel: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let frame = Frame::fit(x.iter().copied(), series.iter().flat_map(|s| s.1.iter().copied()));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, xlabel, ylabel);
    for (k, (_, ys)) in series.iter().enumerate() {
        let mut pts = String::new();
        for (xv, yv) in x.iter().zip(ys) {
            if yv.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", frame.px(*xv), frame.py(*yv));
            }
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.trim_end(),
            PALETTE[k % PALETTE.len()]
        );
    }
    legend(&mut out, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Loss components per epoch; the content loss is scaled by `beta` so it
/// is shown as it enters the generator objective.
pub fn loss_curves_svg(history: &[HistoryRow], beta: f64) -> String {
    let x: Vec<f64> = history.iter().map(|r| r.epoch as f64).collect();
    lines_svg(
        "Training losses",
        "epoch",
        "loss",
        &x,
        &[
            ("β·L_img", history.iter().map(|r| beta * r.l_img).collect()),
            ("L_feat", history.iter().map(|r| r.l_feat).collect()),
            ("L_adv (disc)", history.iter().map(|r| r.l_adv_disc).collect()),
            ("L_adv (gen)", history.iter().map(|r| r.l_adv_gen).collect()),
        ],
    )
}

pub fn discriminator_curves_svg(history: &[HistoryRow]) -> String {
    let x: Vec<f64> = history.iter().map(|r| r.epoch as f64).collect();
    lines_svg(
        "Discriminator outputs",
        "epoch",
        "mean d",
        &x,
        &[
            ("d(real)", history.iter().map(|r| r.d_real_mean).collect()),
            ("d(fake)", history.iter().map(|r| r.d_fake_mean).collect()),
        ],
    )
}
