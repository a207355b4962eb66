//! Static SVG figures: ROC curves and the dynamics heatmap.

use std::fmt::Write as _;

use crate::attack::DynamicsGrid;
use crate::metrics::RocPoint;

const SIZE: f64 = 480.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 6] = ["#b2182b", "#2166ac", "#1b7837", "#762a83", "#e08214", "#4d4d4d"];

fn frame(s: &mut String, title: &str, x_label: &str, y_label: &str) {
    let full = SIZE + 2.0 * PAD;
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#);
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{full}" height="{full}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="14" font-family="sans-serif" text-anchor="middle">{title}</text>"#, full / 2.0, PAD / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif" text-anchor="middle">{x_label}</text>"#, full / 2.0, full - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" font-family="sans-serif" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        full / 2.0,
        full / 2.0
    );
}

fn px(v: f64) -> f64 {
    PAD + v * SIZE
}

fn py(v: f64) -> f64 {
    PAD + (1.0 - v) * SIZE
}

/// ROC curves on linear axes with the chance diagonal.
pub fn roc_svg(title: &str, curves: &[(&str, &[RocPoint])]) -> String {
    let mut s = String::new();
    frame(&mut s, title, "false positive rate", "true positive rate");
    let _ = writeln!(s, r##"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#000000"/>"##);
    let _ = writeln!(s, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999999" stroke-dasharray="4 4"/>"##, px(0.0), py(0.0), px(1.0), py(1.0));
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif" text-anchor="middle">{v}</text>"#, px(v), py(0.0) + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif" text-anchor="end">{v}</text>"#, px(0.0) - 4.0, py(v) + 3.0);
    }
    for (k, (name, points)) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, path.join(" "));
        let y = PAD + 16.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="4" fill="{colour}"/>"#, px(0.62), y - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}" font-size="12" font-family="sans-serif">{name}</text>"#, px(0.62) + 16.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of `grid.tpr[t_under][t_over]`, darker for higher rates.
pub fn dynamics_svg(title: &str, grid: &DynamicsGrid) -> String {
    let mut s = String::new();
    frame(&mut s, title, "over-unlearning steps", "under-unlearning steps");
    let n = grid.t_max + 1;
    let cell = SIZE / n as f64;
    for (tu, row) in grid.tpr.iter().enumerate() {
        for (to, v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                r##"<rect x="{:.3}" y="{:.3}" width="{cell:.3}" height="{cell:.3}" fill="#{shade:02x}{shade:02x}ff" shape-rendering="crispEdges"><title>under {tu}, over {to}: {v:.3}</title></rect>"##,
                PAD + to as f64 * cell,
                PAD + SIZE - (tu + 1) as f64 * cell
            );
        }
    }
    let _ = writeln!(s, r##"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#000000"/>"##);
    for tick in [0, grid.t_max / 2, grid.t_max] {
        let c = (tick as f64 + 0.5) * cell;
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif" text-anchor="middle">{tick}</text>"#, PAD + c, PAD + SIZE + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif" text-anchor="end">{tick}</text>"#, PAD - 4.0, PAD + SIZE - c + 3.0);
    }
    s.push_str("</svg>\n");
    s
}
