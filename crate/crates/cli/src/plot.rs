//! Minimal SVG line charts.

use std::fmt::Write;

use consensus_lab::dynamics::Trajectory;
use consensus_lab::metrics::DiameterSeries;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
/// Values below this are drawn at the floor of the log axis.
const LOG_FLOOR: f64 = 1e-16;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-300 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Frame { x: span(&mut xs.clone()), y: span(&mut ys.clone()) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(svg: &mut String, title: &str, frame: &Frame, y_label: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(svg, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<text x="{l}" y="{}" font-size="11">{:.3}</text>"#, b + 16.0, frame.x.0);
    let _ = writeln!(svg, r#"<text x="{r}" y="{}" font-size="11" text-anchor="end">t = {:.3}</text>"#, b + 16.0, frame.x.1);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="11">{:.3}</text>"#, b, frame.y.0);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="11">{:.3}</text>"#, t, frame.y.1);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="11">{}</text>"#, t - 12.0, escape(y_label));
}

fn polyline(svg: &mut String, frame: &Frame, points: impl Iterator<Item = (f64, f64)>, colour: &str) {
    let mut d = String::new();
    for (k, (x, y)) in points.enumerate() {
        let _ = write!(d, "{}{:.2} {:.2}", if k == 0 { "M" } else { " L" }, frame.px(x), frame.py(y));
    }
    let _ = writeln!(svg, r#"<path d="{d}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `log10 D(t)` against `t`.
pub fn diameter_svg(d: &DiameterSeries, title: &str) -> String {
    let logs: Vec<f64> = d.values.iter().map(|v| v.max(LOG_FLOOR).log10()).collect();
    let frame = Frame::new(d.times.iter().copied(), logs.iter().copied());
    let mut svg = String::new();
    header(&mut svg, &format!("{title}: diameter"), &frame, "log10 D");
    polyline(&mut svg, &frame, d.times.iter().copied().zip(logs.iter().copied()), PALETTE[0]);
    svg.push_str("</svg>\n");
    svg
}

/// First coordinate of every agent against `t`.
pub fn trajectory_svg(tr: &Trajectory, title: &str) -> String {
    let samples: Vec<(f64, &nalgebra::DMatrix<f64>)> = tr.run_samples().collect();
    let frame = Frame::new(samples.iter().map(|s| s.0), samples.iter().flat_map(|s| s.1.column(0).iter().copied().collect::<Vec<_>>()));
    let mut svg = String::new();
    header(&mut svg, &format!("{title}: trajectories"), &frame, "x_i (first coordinate)");
    for i in 0..tr.agent_count() {
        polyline(&mut svg, &frame, samples.iter().map(|(t, x)| (*t, x[(i, 0)])), PALETTE[i % PALETTE.len()]);
    }
    svg.push_str("</svg>\n");
    svg
}
