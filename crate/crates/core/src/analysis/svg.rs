//! Minimal SVG renderings of the radial histogram and the heatmap.

use std::fmt::Write as _;

use crate::analysis::heatmap::HeatmapTable;
use crate::analysis::radial::RadialHistogram;

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

/// Line plot of percent per bin, one polyline per view kind.
pub fn radial_svg(h: &RadialHistogram) -> String {
    let (w, ht, pad) = (640.0, 360.0, 40.0);
    let bins = h.edges.len() - 1;
    let ymax = h
        .kinds
        .iter()
        .flat_map(|k| k.percent.iter())
        .fold(1.0f64, |a, b| a.max(*b));
    let x = |b: usize| pad + (w - 2.0 * pad) * (b as f64 + 0.5) / bins as f64;
    let y = |p: f64| ht - pad - (ht - 2.0 * pad) * p / ymax;
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{ht}">"#);
    let _ = write!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        ht - pad,
        w - pad
    );
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">distance from origin (0 to {:.2})</text>"#,
        w / 2.0,
        ht - 10.0,
        h.edges[bins]
    );
    for (i, k) in h.kinds.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = k
            .percent
            .iter()
            .enumerate()
            .map(|(b, p)| format!("{:.1},{:.1}", x(b), y(*p)))
            .collect();
        let _ = write!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{c}">{}</text>"#,
            w - pad - 100.0,
            pad + 14.0 * i as f64,
            k.name
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grey-scale cells, darker for larger assignment degree.
pub fn heatmap_svg(t: &HeatmapTable) -> String {
    let (cw, ch, left, top) = (110.0, 36.0, 120.0, 30.0);
    let max = t.cells.iter().flatten().fold(f64::MIN_POSITIVE, |a, b| a.max(*b));
    let w = left + cw * t.subtypes.len() as f64 + 10.0;
    let h = top + ch * t.classes.len() as f64 + 10.0;
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    for (j, sub) in t.subtypes.iter().enumerate() {
        let _ = write!(
            s,
            r#"<text x="{}" y="20" font-size="12" text-anchor="middle">{sub}</text>"#,
            left + cw * (j as f64 + 0.5)
        );
    }
    for (i, class) in t.classes.iter().enumerate() {
        let yy = top + ch * i as f64;
        let _ = write!(
            s,
            r#"<text x="4" y="{}" font-size="12">{class}</text>"#,
            yy + ch / 2.0 + 4.0
        );
        for (j, v) in t.cells[i].iter().enumerate() {
            let g = (255.0 * (1.0 - v / max)).round() as u8;
            let xx = left + cw * j as f64;
            let ink = if g < 128 { "white" } else { "black" };
            let _ = write!(
                s,
                r#"<rect x="{xx}" y="{yy}" width="{cw}" height="{ch}" fill="rgb({g},{g},{g})"/><text x="{}" y="{}" font-size="11" text-anchor="middle" fill="{ink}">{v:.4}</text>"#,
                xx + cw / 2.0,
                yy + ch / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::radial::histogram;
    use crate::synth::{NucleusClass, Subtype};

    #[test]
    fn renders_well_formed_documents() {
        let h = histogram(&[("a".into(), vec![0.1, 0.5, 1.0])], 4).unwrap();
        let s = radial_svg(&h);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 1);
        let t = HeatmapTable {
            classes: vec![NucleusClass::Centroblast],
            subtypes: vec![Subtype::Fl, Subtype::Dlbcl],
            cells: vec![vec![0.1, 0.2]],
        };
        assert_eq!(heatmap_svg(&t).matches("<rect").count(), 2);
    }
}
