//! Minimal SVG line charts: one panel per velocity component, one line per
//! bubble.

use std::collections::BTreeSet;
use std::fmt::Write;

use bubblesplat::io::FrameSeries;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Polyline points of one bubble's component over time.
fn track(series: &FrameSeries, id: u32, comp: usize, dt: f64) -> Vec<(f64, f64)> {
    series.iter().filter_map(|(t, row)| row.get(&id).map(|v| (*t as f64 * dt, v[comp]))).collect()
}

pub fn velocity_svg(series: &FrameSeries, gt: Option<&FrameSeries>, dt: Option<f64>) -> String {
    let scale = dt.unwrap_or(1.0);
    let ids: BTreeSet<u32> = series.values().flat_map(|r| r.keys().copied()).collect();
    let gt_ids: BTreeSet<u32> = gt.map(|g| g.values().flat_map(|r| r.keys().copied()).collect()).unwrap_or_default();
    let all = || series.iter().chain(gt.into_iter().flatten());
    let (x0, x1) = range(all().map(|(t, _)| *t as f64 * scale));
    let width = 3.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 20.0 * (ids.len() + gt_ids.len()).max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let xlabel = if dt.is_some() { "time (s)" } else { "frame" };
    for (comp, name) in ["vx", "vy", "vz"].iter().enumerate() {
        let left = MARGIN + comp as f64 * (PANEL_W + MARGIN);
        let top = MARGIN;
        let (y0, y1) = range(all().flat_map(|(_, row)| row.values().map(move |v| v[comp])));
        let px = |x: f64| left + (x - x0) / (x1 - x0) * PANEL_W;
        let py = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(svg, r#"<rect x="{left:.1}" y="{top:.1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#);
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.2}</text>"#,
                px(fx),
                top + PANEL_H + 14.0
            );
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, left - 4.0, py(fy) + 4.0);
            let _ = writeln!(
                svg,
                "<line x1=\"{left:.1}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>",
                py(fy),
                left + PANEL_W
            );
        }
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{name} (m/s)</text>"#, left + PANEL_W / 2.0, top - 10.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text>"#, left + PANEL_W / 2.0, top + PANEL_H + 30.0);
        let mut draw = |s: &FrameSeries, id: u32, dashed: bool| {
            let pts = track(s, id, comp, scale);
            let color = PALETTE[id as usize % PALETTE.len()];
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
            let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, path.join(" "));
            if !dashed {
                for (x, y) in &pts {
                    let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#, px(*x), py(*y));
                }
            }
        };
        for &id in &ids {
            draw(series, id, false);
        }
        if let Some(g) = gt {
            for &id in &gt_ids {
                draw(g, id, true);
            }
        }
    }
    let mut y = MARGIN + PANEL_H + 50.0;
    let entries = ids.iter().map(|id| (*id, false)).chain(gt_ids.iter().map(|id| (*id, true)));
    for (id, dashed) in entries {
        let color = PALETTE[id as usize % PALETTE.len()];
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let label = match (id, dashed) {
            (0, false) => "nucleation".to_string(),
            (i, false) => format!("bubble {i}"),
            (i, true) => format!("ground truth {i}"),
        };
        let _ = writeln!(svg, r#"<line x1="{MARGIN}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"{dash}/>"#, MARGIN + 24.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{label}</text>"#, MARGIN + 30.0, y + 4.0);
        y += 20.0;
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use std::collections::BTreeMap;

    fn series() -> FrameSeries {
        (1..5).map(|t| (t, BTreeMap::from([(1, Vector3::new(0.0, 0.3, 0.01 * t as f64)), (2, Vector3::new(0.01, 0.29, 0.0))]))).collect()
    }

    #[test]
    fn one_polyline_per_bubble_and_component() {
        let svg = velocity_svg(&series(), None, Some(0.05));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 6);
        assert!(svg.contains("time (s)"));
        let with_gt = velocity_svg(&series(), Some(&series()), None);
        assert_eq!(with_gt.matches("stroke-dasharray").count(), 6 + 2);
    }

    #[test]
    fn empty_series_still_renders() {
        let svg = velocity_svg(&FrameSeries::new(), None, None);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert!(!svg.contains("NaN"));
    }
}
