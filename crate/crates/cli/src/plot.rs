//! Minimal SVG line charts for duplication curves.

use std::collections::BTreeMap;
use std::fmt::Write;

use memaudit::memscore::CurvePoint;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One series per metric; levels are evenly spaced on the x axis, error
/// bars show the confidence interval.
pub fn render_svg(points: &[CurvePoint], title: &str) -> String {
    let mut levels: Vec<u32> = points.iter().map(|p| p.level).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut series: BTreeMap<&str, Vec<&CurvePoint>> = BTreeMap::new();
    for p in points {
        series.entry(&p.metric).or_default().push(p);
    }
    let finite = |v: f64| v.is_finite().then_some(v);
    let lo = points.iter().filter_map(|p| finite(p.ci_lo)).fold(f64::INFINITY, f64::min);
    let hi = points.iter().filter_map(|p| finite(p.ci_hi)).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else if lo.is_finite() { (lo - 1.0, lo + 1.0) } else { (0.0, 1.0) };
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);

    let x_of = |level: u32| {
        let i = levels.iter().position(|&l| l == level).unwrap_or(0) as f64;
        let span = (levels.len().max(2) - 1) as f64;
        MARGIN + i / span * (W - 2.0 * MARGIN)
    };
    let y_of = |v: f64| H - MARGIN - (v - lo) / (hi - lo) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#);
    for &l in &levels {
        let x = x_of(l);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{l}</text>"#, y0 + 16.0);
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">duplication level</text>"#, W / 2.0, H - 12.0);

    for (k, (metric, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts = pts.clone();
        pts.sort_by_key(|p| p.level);
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.mean.is_finite())
            .enumerate()
            .map(|(i, p)| format!("{}{:.1} {:.1}", if i == 0 { "M" } else { "L" }, x_of(p.level), y_of(p.mean)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for p in pts.iter().filter(|p| p.mean.is_finite()) {
            let x = x_of(p.level);
            if p.ci_lo.is_finite() && p.ci_hi.is_finite() {
                let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#, y_of(p.ci_lo), y_of(p.ci_hi));
            }
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, y_of(p.mean));
        }
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#, x1 - 140.0, escape(metric));
    }
    s.push_str("</svg>\n");
    s
}
