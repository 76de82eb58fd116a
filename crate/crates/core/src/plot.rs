//! Static SVG line charts of metric series.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 44.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One chart with a line per series. With `log_y` non-positive values are dropped.
pub fn line_chart(title: &str, series: &[(String, Vec<(usize, f64)>)], log_y: bool) -> String {
    let tf = |v: f64| if log_y { v.log10() } else { v };
    let pts: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(n, s)| {
            let p = s
                .iter()
                .filter(|(_, v)| v.is_finite() && (!log_y || *v > 0.0))
                .map(|(x, v)| (*x as f64, tf(*v)))
                .collect();
            (n.clone(), p)
        })
        .collect();
    let all: Vec<(f64, f64)> = pts.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
    let sy = |y: f64| H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        l = PAD_L,
        t = PAD_T,
        b = H - PAD_B,
        r = W - PAD_R
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let label = if log_y { format!("{:.3e}", 10f64.powf(yv)) } else { format!("{yv:.4}") };
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, PAD_L - 6.0, sy(yv) + 4.0);
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{:.0}</text>"#, sx(xv), H - PAD_B + 16.0, xv);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (PAD_L + W - PAD_R) / 2.0, H - 8.0);
    for (i, (name, p)) in pts.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !p.is_empty() {
            let d: Vec<String> =
                p.iter().enumerate().map(|(j, (x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx(*x), sy(*y))).collect();
            let _ = writeln!(svg, r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, d.join(" "));
        }
        let ly = PAD_T + 14.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#, W - PAD_R - 4.0, ly + 10.0, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}
