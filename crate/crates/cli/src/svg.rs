//! Minimal standalone SVG plots. Output depends only on the series, so
//! identical inputs give identical files.

use std::fmt::Write;

use psw_core::balance::{DensitySeries, HistogramSeries, LoveSeries};

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];
const W: f64 = 640.0;
const MARGIN_L: f64 = 150.0;
const MARGIN_R: f64 = 130.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn colour(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

/// Rounds coordinates so floating point noise never reaches the file.
fn c(v: f64) -> String {
    format!("{v:.2}")
}

struct Canvas {
    out: String,
}

impl Canvas {
    fn new(height: f64, title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" viewBox="0 0 {W} {}" font-family="sans-serif" font-size="11">"#,
            c(height),
            c(height)
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, c(W / 2.0), esc(title));
        Self { out }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, extra: &str) {
        let _ = writeln!(
            self.out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}" {extra}/>"#,
            c(x1),
            c(y1),
            c(x2),
            c(y2)
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(self.out, r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#, c(x), c(y), esc(s));
    }

    fn legend(&mut self, names: &[String], top: f64) {
        for (k, name) in names.iter().enumerate() {
            let y = top + 16.0 * k as f64;
            let x = W - MARGIN_R + 15.0;
            let _ = writeln!(self.out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, c(x), c(y - 9.0), colour(k));
            self.text(x + 15.0, y, "start", name);
        }
    }

    /// Axis box with ticks along x from lo to hi.
    fn x_axis(&mut self, top: f64, bottom: f64, lo: f64, hi: f64, label: &str) {
        let (l, r) = (MARGIN_L, W - MARGIN_R);
        let _ = writeln!(
            self.out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            c(l),
            c(top),
            c(r - l),
            c(bottom - top)
        );
        for t in 0..=4 {
            let v = lo + (hi - lo) * t as f64 / 4.0;
            let x = l + (r - l) * t as f64 / 4.0;
            self.line(x, bottom, x, bottom + 4.0, "black", "");
            self.text(x, bottom + 16.0, "middle", &format!("{v:.2}"));
        }
        self.text((l + r) / 2.0, bottom + 34.0, "middle", label);
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Dot chart of the balance metric per covariate, one colour per scheme,
/// with a dashed line at the threshold.
pub fn love_plot(s: &LoveSeries) -> String {
    let rows = s.covariates.len().max(1) as f64;
    let height = MARGIN_T + MARGIN_B + 22.0 * rows;
    let mut cv = Canvas::new(height, "Covariate balance");
    let finite = s.schemes.iter().flat_map(|n| n.values.iter().copied()).filter(|v| v.is_finite());
    let hi = finite.fold(s.threshold, f64::max) * 1.1;
    let (top, bottom) = (MARGIN_T, height - MARGIN_B);
    let metric = format!("{:?}", s.metric).to_uppercase();
    cv.x_axis(top, bottom, 0.0, hi, &metric);
    let sx = |v: f64| MARGIN_L + (W - MARGIN_L - MARGIN_R) * v / hi;
    let tx = sx(s.threshold);
    cv.line(tx, top, tx, bottom, "grey", r#"stroke-dasharray="4 3""#);
    for (i, name) in s.covariates.iter().enumerate() {
        let y = top + 22.0 * (i as f64 + 0.5);
        cv.line(MARGIN_L, y, W - MARGIN_R, y, "#eeeeee", "");
        cv.text(MARGIN_L - 6.0, y + 4.0, "end", name);
        for (k, series) in s.schemes.iter().enumerate() {
            let v = series.values[i];
            if v.is_finite() {
                let _ = writeln!(cv.out, r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#, c(sx(v)), c(y), colour(k));
            }
        }
    }
    let names: Vec<String> = s.schemes.iter().map(|n| n.name.clone()).collect();
    cv.legend(&names, top + 10.0);
    cv.finish()
}

/// One panel per propensity column, one curve per treatment group.
pub fn density_plot(panels: &[DensitySeries]) -> String {
    let panel_h = 200.0;
    let gap = 60.0;
    let height = MARGIN_T + panels.len() as f64 * (panel_h + gap);
    let mut cv = Canvas::new(height, "Propensity score distribution");
    for (p, panel) in panels.iter().enumerate() {
        let top = MARGIN_T + p as f64 * (panel_h + gap);
        let bottom = top + panel_h;
        cv.x_axis(top, bottom, 0.0, 1.0, &format!("P(Z = {})", panel.column));
        let ymax = panel.groups.iter().flat_map(|g| g.values.iter().copied()).fold(0.0, f64::max).max(1e-12) * 1.05;
        for (k, g) in panel.groups.iter().enumerate() {
            let pts: Vec<String> = panel
                .grid
                .iter()
                .zip(&g.values)
                .map(|(x, y)| {
                    let px = MARGIN_L + (W - MARGIN_L - MARGIN_R) * x;
                    let py = bottom - (bottom - top) * y / ymax;
                    format!("{},{}", c(px), c(py))
                })
                .collect();
            let _ = writeln!(
                cv.out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                colour(k),
                pts.join(" ")
            );
        }
        let names: Vec<String> = panel.groups.iter().map(|g| g.name.clone()).collect();
        cv.legend(&names, top + 10.0);
    }
    cv.finish()
}

/// Overlaid translucent bars, one colour per group.
pub fn histogram_plot(s: &HistogramSeries) -> String {
    let height = 320.0;
    let mut cv = Canvas::new(height, "Propensity score histogram");
    let (top, bottom) = (MARGIN_T, height - MARGIN_B);
    cv.x_axis(top, bottom, 0.0, 1.0, &format!("P(Z = {})", s.column));
    let ymax = s.groups.iter().flat_map(|g| g.values.iter().copied()).fold(0.0, f64::max).max(1.0);
    let sx = |v: f64| MARGIN_L + (W - MARGIN_L - MARGIN_R) * v;
    for (k, g) in s.groups.iter().enumerate() {
        for (b, count) in g.values.iter().enumerate() {
            if *count <= 0.0 {
                continue;
            }
            let (x0, x1) = (sx(s.edges[b]), sx(s.edges[b + 1]));
            let h = (bottom - top) * count / ymax;
            let _ = writeln!(
                cv.out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="0.5"/>"#,
                c(x0),
                c(bottom - h),
                c(x1 - x0),
                c(h),
                colour(k)
            );
        }
    }
    let names: Vec<String> = s.groups.iter().map(|g| g.name.clone()).collect();
    cv.legend(&names, top + 10.0);
    cv.finish()
}
