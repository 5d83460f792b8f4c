//! Static SVG rendering of closed-loop logs: one panel per state with the visited trajectory,
//! the state-set bounds and the confidence boxes of every plan.

use std::fmt::Write as _;

use crate::pipeline::{InputSource, TrajectoryLog};

const PANEL_W: f64 = 720.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 36.0;

struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, from: f64, to: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Axis { lo, hi, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Trajectory panels for every state dimension, stacked vertically.
pub fn render_svg(log: &TrajectoryLog) -> String {
    let n_x = log.n_x;
    let height = PANEL_H * n_x as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" viewBox="0 0 {PANEL_W} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let bounds = log.state_set.as_bounds();
    let n_steps = log.steps.len();
    let t_max = (n_steps + log.horizon).max(1) as f64;

    for j in 0..n_x {
        let top = PANEL_H * j as f64;
        let mut states = vec![log.initial_state[j]];
        states.extend(log.steps.iter().map(|s| s.next_state[j]));
        let mut lo = states.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = states.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for s in &log.steps {
            for b in &s.boxes {
                if b.lower[j].is_finite() && b.upper[j].is_finite() {
                    lo = lo.min(b.lower[j]);
                    hi = hi.max(b.upper[j]);
                }
            }
        }
        if let Some((l, h)) = &bounds {
            lo = lo.min(l[j]);
            hi = hi.max(h[j]);
        }
        let pad = 0.05 * (hi - lo).max(1e-9);
        let ya = Axis::new(lo - pad, hi + pad, top + PANEL_H - MARGIN_B, top + MARGIN_T);
        let xa = Axis::new(0.0, t_max, MARGIN_L, PANEL_W - MARGIN_R);

        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN_L}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            top + MARGIN_T,
            PANEL_W - MARGIN_L - MARGIN_R,
            PANEL_H - MARGIN_T - MARGIN_B
        );
        let title = format!("{} ({:?}, srs {}): x{}", log.experiment, log.mode, log.srs, j + 1);
        let _ = writeln!(svg, r#"<text x="{MARGIN_L}" y="{:.2}">{}</text>"#, top + 18.0, escape(&title));
        for v in [ya.lo, 0.5 * (ya.lo + ya.hi), ya.hi] {
            let _ = writeln!(svg, r#"<text x="4" y="{:.2}">{v:.3}</text>"#, ya.map(v) + 4.0);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">step</text><text x="{MARGIN_L}" y="{:.2}">0</text><text x="{:.2}" y="{:.2}">{}</text>"#,
            0.5 * PANEL_W,
            top + PANEL_H - 6.0,
            top + PANEL_H - MARGIN_B + 14.0,
            PANEL_W - MARGIN_R - 16.0,
            top + PANEL_H - MARGIN_B + 14.0,
            t_max as usize
        );

        if let Some((l, h)) = &bounds {
            for v in [l[j], h[j]] {
                if v.is_finite() {
                    let y = ya.map(v);
                    let _ = writeln!(
                        svg,
                        r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#c00" stroke-dasharray="6 4"/>"##,
                        xa.from, xa.to
                    );
                }
            }
        }

        // Boxes of each applied plan: step-t prediction made at time k sits at k + t.
        for s in log.steps.iter().filter(|s| s.source == InputSource::Optimal) {
            for (t, b) in s.boxes.iter().enumerate() {
                if !(b.lower[j].is_finite() && b.upper[j].is_finite()) {
                    continue;
                }
                let x = xa.map((s.time + t + 1) as f64) + if t == 0 { 0.0 } else { 1.5 * t as f64 };
                let (color, width) = if t == 0 { ("#1f77b4", 1.6) } else { ("#9ab", 0.8) };
                let _ = writeln!(
                    svg,
                    r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}" stroke-width="{width}"/>"#,
                    ya.map(b.lower[j]),
                    ya.map(b.upper[j])
                );
            }
        }

        let mut path = String::new();
        for (k, v) in states.iter().enumerate() {
            let _ = write!(path, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, xa.map(k as f64), ya.map(*v));
        }
        let _ = writeln!(svg, r##"<path d="{}" fill="none" stroke="#111" stroke-width="1.4"/>"##, path.trim_end());
        for (k, s) in log.steps.iter().enumerate() {
            let outside = match &bounds {
                Some((l, h)) => s.next_state[j] < l[j] || s.next_state[j] > h[j],
                None => true,
            };
            if s.violation && outside {
                let _ = writeln!(
                    svg,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#c00"/>"##,
                    xa.map((k + 1) as f64),
                    ya.map(s.next_state[j])
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
