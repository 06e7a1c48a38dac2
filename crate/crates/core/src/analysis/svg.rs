//! Minimal SVG plots: heatmap, line plot and bar chart.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;

fn open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// White-to-red colour for `v` in `[0, 1]`.
fn colour(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let g = (255.0 * (1.0 - v)).round() as u8;
    format!("#ff{g:02x}{g:02x}")
}

fn range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (lo.min(0.0), lo.max(0.0) + 1.0)
    }
}

/// Heatmap of a row-major `rows × cols` matrix, scaled between its minimum and maximum.
pub fn heatmap(values: &[f64], rows: usize, cols: usize, title: &str) -> String {
    let mut s = open(title);
    let (lo, hi) = range(values);
    let cw = (WIDTH - 2.0 * MARGIN) / cols.max(1) as f64;
    let ch = (HEIGHT - 2.0 * MARGIN) / rows.max(1) as f64;
    for r in 0..rows {
        for c in 0..cols {
            let v = (values[r * cols + c] - lo) / (hi - lo);
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                MARGIN + c as f64 * cw,
                MARGIN + r as f64 * ch,
                cw,
                ch,
                colour(v)
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">range [{lo:.4}, {hi:.4}]</text>"#,
        HEIGHT - 16.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Line plot of one or more equally long series.
pub fn line_plot(series: &[(&str, &[f64])], title: &str) -> String {
    const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let mut s = open(title);
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let (lo, hi) = range(&all);
    let w = WIDTH - 2.0 * MARGIN;
    let h = HEIGHT - 2.0 * MARGIN;
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for (i, (name, values)) in series.iter().enumerate() {
        let step = w / (values.len().max(2) - 1) as f64;
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(t, v)| format!("{:.2},{:.2}", MARGIN + t as f64 * step, MARGIN + h * (1.0 - (v - lo) / (hi - lo))))
            .collect();
        let stroke = PALETTE[i % PALETTE.len()];
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{stroke}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{stroke}">{}</text>"#,
            MARGIN + 6.0,
            MARGIN + 14.0 * (i + 1) as f64,
            escape(name)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">range [{lo:.4}, {hi:.4}]</text>"#,
        HEIGHT - 16.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Vertical bar chart of nonnegative values.
pub fn bar_chart(labels: &[String], values: &[f64], title: &str) -> String {
    let mut s = open(title);
    let top = values.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let w = (WIDTH - 2.0 * MARGIN) / values.len().max(1) as f64;
    let h = HEIGHT - 2.0 * MARGIN;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let bh = h * v.max(0.0) / top;
        let x = MARGIN + i as f64 * w;
        writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0"/>"##,
            x + 0.1 * w,
            MARGIN + h - bh,
            0.8 * w,
            bh
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            x + 0.5 * w,
            HEIGHT - MARGIN + 16.0,
            escape(label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.3}</text>"#,
            x + 0.5 * w,
            MARGIN + h - bh - 4.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
