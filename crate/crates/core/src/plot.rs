//! Minimal SVG emitters: scatter, line, and upper-triangular heat map.
//! No plotting dependency; output is deterministic text.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = (f64, f64)> + 'a) -> Frame {
        let mut f = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for (x, y) in points {
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        if !f.x_min.is_finite() {
            f = Frame { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 };
        }
        if f.x_max - f.x_min < 1e-12 {
            f.x_max = f.x_min + 1.0;
        }
        if f.y_max - f.y_min < 1e-12 {
            f.y_max = f.y_min + 1.0;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        title
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<line x1="{m:.1}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        out,
        r#"<line x1="{m:.1}" y1="{t:.1}" x2="{m:.1}" y2="{b:.1}" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    );
    for i in 0..=4 {
        let fx = f.x_min + (f.x_max - f.x_min) * i as f64 / 4.0;
        let fy = f.y_min + (f.y_max - f.y_min) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{:.3}</text>"#,
            f.px(fx),
            HEIGHT - MARGIN + 16.0,
            fx
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3}</text>"#,
            MARGIN - 6.0,
            f.py(fy) + 3.0,
            fy
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        x_label
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {0:.1})">{}</text>"#,
        HEIGHT / 2.0,
        y_label
    );
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Scatter plot with one color per named series and a legend.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    svg_open(&mut out, title);
    let frame = Frame::from_points(series.iter().flat_map(|(_, pts)| pts.iter().copied()));
    axes(&mut out, &frame, x_label, y_label);
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for &(x, y) in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
                frame.px(x),
                frame.py(y),
                color
            );
        }
        let ly = MARGIN + 14.0 * si as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#,
            WIDTH - MARGIN - 110.0,
            ly,
            color
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            WIDTH - MARGIN - 96.0,
            ly + 9.0,
            name
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot, one polyline per named series.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    svg_open(&mut out, title);
    let frame = Frame::from_points(series.iter().flat_map(|(_, pts)| pts.iter().copied()));
    axes(&mut out, &frame, x_label, y_label);
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            path.join(" "),
            color
        );
        for &(x, y) in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                frame.px(x),
                frame.py(y),
                color
            );
        }
        let ly = MARGIN + 14.0 * si as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#,
            WIDTH - MARGIN - 110.0,
            ly,
            color
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            WIDTH - MARGIN - 96.0,
            ly + 9.0,
            name
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Upper-triangular heat map (diagonal included) over `labels x labels`.
/// `cells` maps (row, col) with `row <= col` to a value.
pub fn heatmap_svg(title: &str, labels: &[&str], cells: &[((usize, usize), f64)]) -> String {
    let n = labels.len();
    let mut out = String::new();
    svg_open(&mut out, title);
    let lo = cells.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
    let cell = ((WIDTH - 2.0 * MARGIN) / n as f64).min((HEIGHT - 2.0 * MARGIN) / n as f64);
    for &((r, c), v) in cells {
        let frac = (v - lo) / span;
        // white -> blue ramp
        let shade = (255.0 - 155.0 * frac) as u8;
        let x = MARGIN + c as f64 * cell;
        let y = MARGIN + r as f64 * cell;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb({shade},{shade},255)" stroke="black"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{:.3}</text>"#,
            x + cell / 2.0,
            y + cell / 2.0 + 3.0,
            v
        );
    }
    for (i, label) in labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            MARGIN + i as f64 * cell + cell / 2.0,
            MARGIN - 8.0,
            label
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            MARGIN + i as f64 * cell + cell / 2.0 + 4.0,
            label
        );
    }
    out.push_str("</svg>\n");
    out
}
