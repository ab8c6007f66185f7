//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, ylabel: &str, lo: f64, hi: f64) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="end">{}</text>
<text x="{}" y="{}" text-anchor="end">{}</text>
"#,
        W / 2.0,
        esc(title),
        H / 2.0,
        H / 2.0,
        esc(ylabel),
        H - PAD,
        H - PAD,
        W - PAD,
        H - PAD,
        PAD - 4.0,
        H - PAD,
        fmt_num(lo),
        PAD - 4.0,
        PAD + 4.0,
        fmt_num(hi),
    );
    s
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Line chart of named series sharing an x axis.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let (ylo, yhi) = range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let (xlo, xhi) = range(x.iter().copied());
    let sx = |v: f64| PAD + (v - xlo) / (xhi - xlo) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - ylo) / (yhi - ylo) * (H - 2.0 * PAD);
    let mut s = frame(title, ylabel, ylo, yhi);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        esc(xlabel)
    );
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&a, &b)| format!("{:.2},{:.2}", sx(a), sy(b)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart with one bar per label.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let (lo, hi) = range(bars.iter().map(|b| b.1).chain([0.0]));
    let sy = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let mut s = frame(title, ylabel, lo, hi);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let zero = sy(0.0);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.15;
        let (top, bottom) = if *v >= 0.0 { (sy(*v), zero) } else { (zero, sy(*v)) };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.7,
            (bottom - top).max(0.5),
            COLORS[i % COLORS.len()]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="end" transform="rotate(-35 {:.2} {})" font-size="10">{}</text>"#,
            x + slot * 0.35,
            H - PAD + 14.0,
            x + slot * 0.35,
            H - PAD + 14.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
