//! Minimal SVG writers on a fixed 800x800 canvas.
//!
//! Color map:
//! - Categorical series (scatter labels, line series) cycle through
//!   [`PALETTE`]; unlabeled points and reference data use [`NEUTRAL`].
//! - Heatmaps map the grid linearly from its minimum to its maximum through
//!   five stops, dark blue -> teal -> green -> yellow-green -> yellow
//!   ([`HEAT_STOPS`]); a constant grid is drawn in the lowest color.

use std::fmt::Write as _;

pub const SIZE: f64 = 800.0;
const MARGIN: f64 = 60.0;

pub const PALETTE: [&str; 8] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
pub const NEUTRAL: &str = "#7f7f7f";
pub const HEAT_STOPS: [(f64, [u8; 3]); 5] = [
    (0.0, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.5, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.0, [253, 231, 37]),
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" width="{SIZE}" height="{SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="20">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    s
}

/// Maps `[lo, hi]` onto the plot area; degenerate ranges are widened.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self { lo: lo - 0.5, hi: hi + 0.5 };
        }
        let pad = 0.05 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.lo) / (self.hi - self.lo) * (SIZE - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        SIZE - MARGIN - (v - self.lo) / (self.hi - self.lo) * (SIZE - 2.0 * MARGIN)
    }
}

fn frame(s: &mut String) {
    let w = SIZE - 2.0 * MARGIN;
    let _ = writeln!(s, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{w}" fill="none" stroke="black"/>"#);
}

fn axis_labels(s: &mut String, xa: &Axis, ya: &Axis, xlabel: &str, ylabel: &str) {
    let t = |s: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="13">{}</text>"#,
            escape(text)
        );
    };
    t(s, MARGIN, SIZE - MARGIN + 18.0, "start", &format!("{:.3}", xa.lo));
    t(s, SIZE - MARGIN, SIZE - MARGIN + 18.0, "end", &format!("{:.3}", xa.hi));
    t(s, MARGIN - 6.0, SIZE - MARGIN, "end", &format!("{:.3}", ya.lo));
    t(s, MARGIN - 6.0, MARGIN + 10.0, "end", &format!("{:.3}", ya.hi));
    t(s, SIZE / 2.0, SIZE - 20.0, "middle", xlabel);
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 20 {:.1})">{}</text>"#,
        SIZE / 2.0,
        SIZE / 2.0,
        escape(ylabel)
    );
}

/// Scatter of 2-D points; `labels[i]` picks the palette color, `None` draws
/// everything in the first palette color. `reference` points are drawn first
/// in the neutral color.
pub fn scatter(title: &str, points: &[[f64; 2]], labels: Option<&[usize]>, reference: &[[f64; 2]]) -> String {
    let all = || points.iter().chain(reference);
    // Shared scale on both axes keeps circles round.
    let axis = Axis::fit(all().flat_map(|p| [p[0], p[1]]));
    let mut s = header(title);
    frame(&mut s);
    for p in reference {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{NEUTRAL}" fill-opacity="0.4"/>"#,
            axis.x(p[0]),
            axis.y(p[1])
        );
    }
    for (i, p) in points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let color = labels.map(|l| PALETTE[l[i] % PALETTE.len()]).unwrap_or(PALETTE[0]);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.7"/>"#,
            axis.x(p[0]),
            axis.y(p[1])
        );
    }
    axis_labels(&mut s, &axis, &axis, "x0", "x1");
    s.push_str("</svg>\n");
    s
}

pub fn heat_color(u: f64) -> [u8; 3] {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 1.0 };
    for w in HEAT_STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if u <= b {
            let f = (u - a) / (b - a);
            let mix = |k: usize| (ca[k] as f64 + f * (cb[k] as f64 - ca[k] as f64)).round() as u8;
            return [mix(0), mix(1), mix(2)];
        }
    }
    HEAT_STOPS[HEAT_STOPS.len() - 1].1
}

/// Row-major `res x res` grid; row index runs along the horizontal axis
/// (first direction), column index along the vertical axis.
pub fn heatmap(title: &str, grid: &[f64], res: usize, coords: &[f64]) -> String {
    let lo = grid.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 0.0 };
    let cell = (SIZE - 2.0 * MARGIN) / res.max(1) as f64;
    let mut s = header(title);
    for i in 0..res {
        for j in 0..res {
            let v = grid[i * res + j];
            let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let [r, g, b] = heat_color(u);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},{g},{b})"/>"#,
                MARGIN + i as f64 * cell,
                SIZE - MARGIN - (j + 1) as f64 * cell,
                cell + 0.05,
                cell + 0.05
            );
        }
    }
    frame(&mut s);
    let axis = Axis {
        lo: coords.first().copied().unwrap_or(0.0),
        hi: coords.last().copied().unwrap_or(1.0),
    };
    axis_labels(&mut s, &axis, &axis, "alpha", "beta");
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="50" text-anchor="middle" font-family="sans-serif" font-size="13">loss range [{lo:.4e}, {hi:.4e}]</text>"#,
        SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// Line plot of named series over shared or separate x values.
pub fn lines(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xa = Axis::fit(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let ya = Axis::fit(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut s = header(title);
    frame(&mut s);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", xa.x(x), ya.y(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let ly = MARGIN + 20.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/>"#,
            SIZE - MARGIN - 170.0,
            SIZE - MARGIN - 145.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13">{}</text>"#,
            SIZE - MARGIN - 140.0,
            ly + 4.0,
            escape(name)
        );
    }
    axis_labels(&mut s, &xa, &ya, xlabel, ylabel);
    s.push_str("</svg>\n");
    s
}
