//! Text and SVG renderings. Numbers use fixed precision so output is
//! byte-stable across runs.

use super::aggregate::HeadToHeadRow;
use super::criteria::{CriteriaReport, CLINICAL_CRITERIA};
use super::{DvhCurve, DVH_STEP_GY};
use crate::stats::quantile_sorted;
use std::fmt::Write;

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `(patient, method, report)` rows, one line per criterion.
pub fn criteria_csv(entries: &[(String, String, CriteriaReport)]) -> String {
    let mut s = String::from("patient,method,criterion,achieved_gy,passed,margin_gy\n");
    for (patient, method, report) in entries {
        for o in &report.outcomes {
            let passed = o.passed().map(|p| if p { "1" } else { "0" }).unwrap_or("");
            let _ = writeln!(s, "{patient},{method},{},{},{passed},{}", o.criterion, opt(o.achieved), opt(o.margin()));
        }
    }
    s
}

/// One column per curve, one row per dose level.
pub fn dvh_csv(curves: &[DvhCurve]) -> String {
    let mut s = String::from("dose_gy");
    for c in curves {
        let _ = write!(s, ",{}", c.structure.name());
    }
    s.push('\n');
    let n = curves.iter().map(DvhCurve::len).max().unwrap_or(0);
    for k in 0..n {
        let _ = write!(s, "{:.1}", k as f64 * DVH_STEP_GY);
        for c in curves {
            let _ = write!(s, ",{}", c.volume.get(k).map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn rgb(c: [f32; 3]) -> String {
    let b = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", b(c[0]), b(c[1]), b(c[2]))
}

/// Cumulative DVHs, dose on x (0 to 80 Gy), volume on y.
pub fn dvh_svg(curves: &[DvhCurve], title: &str) -> String {
    let mut s = svg_open(title);
    let x_of = |k: usize| PAD + (W - 2.0 * PAD) * k as f64 / 800.0;
    let y_of = |v: f64| H - PAD - (H - 2.0 * PAD) * v;
    for (i, c) in curves.iter().enumerate() {
        let mut d = String::new();
        for (k, v) in c.volume.iter().enumerate() {
            let _ = write!(d, "{}{:.2} {:.2}", if k == 0 { "M" } else { " L" }, x_of(k), y_of(*v));
        }
        let colour = rgb(c.structure.color());
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            W - PAD + 4.0,
            PAD + 14.0 * i as f64,
            c.structure.name()
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Dose (Gy)</text>"#, W / 2.0, H - 15.0);
    s.push_str("</svg>\n");
    s
}

/// `(patient, method, rows)` flattened to one line per criterion.
pub fn head_to_head_csv(entries: &[(String, String, Vec<HeadToHeadRow>)]) -> String {
    let mut s = String::from("patient,method,criterion,difference_gy\n");
    for (patient, method, rows) in entries {
        for r in rows {
            let _ = writeln!(s, "{patient},{method},{},{}", r.criterion, opt(r.difference));
        }
    }
    s
}

/// Box plot of differences per criterion, one box per method.
pub fn head_to_head_svg(entries: &[(String, String, Vec<HeadToHeadRow>)], title: &str) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for (_, m, _) in entries {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
    }
    let mut boxes = Vec::new();
    for (ci, c) in CLINICAL_CRITERIA.iter().enumerate() {
        for (mi, m) in methods.iter().enumerate() {
            let mut d: Vec<f64> = entries
                .iter()
                .filter(|(_, em, _)| em == m)
                .flat_map(|(_, _, rows)| rows.iter().filter(|r| r.criterion == *c).filter_map(|r| r.difference))
                .collect();
            if d.is_empty() {
                continue;
            }
            d.sort_by(f64::total_cmp);
            let q = |p| quantile_sorted(&d, p);
            boxes.push((ci, mi, [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]));
        }
    }
    let lim = boxes.iter().flat_map(|b| [b.2[0].abs(), b.2[4].abs()]).fold(1.0, f64::max);
    let y_of = |v: f64| H / 2.0 - (H / 2.0 - PAD) * v / lim;
    let slot = (W - 2.0 * PAD) / CLINICAL_CRITERIA.len() as f64;
    let bw = slot / (methods.len().max(1) as f64 + 1.0);

    let mut s = svg_open(title);
    let _ = writeln!(s, r#"<line x1="{PAD}" x2="{}" y1="{}" y2="{}" stroke="grey" stroke-dasharray="4 3"/>"#, W - PAD, H / 2.0, H / 2.0);
    for (ci, c) in CLINICAL_CRITERIA.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="9">{} {}</text>"#,
            PAD + slot * (ci as f64 + 0.5),
            H - PAD + 14.0,
            c.structure.name(),
            c.statistic.label()
        );
    }
    let palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
    for (mi, m) in methods.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{}">{}</text>"#, PAD + 4.0, PAD + 14.0 * mi as f64, palette[mi % 6], escape(m));
    }
    for (ci, mi, q) in boxes {
        let x = PAD + slot * ci as f64 + bw * (mi as f64 + 0.5);
        let colour = palette[mi % 6];
        let cx = x + bw / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="{colour}"/>"#,
            y_of(q[0]),
            y_of(q[4])
        );
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="white" stroke="{colour}"/>"#,
            y_of(q[3]),
            bw * 0.9,
            (y_of(q[1]) - y_of(q[3])).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="{colour}" stroke-width="2"/>"#,
            x + bw * 0.9,
            y_of(q[2]),
            y_of(q[2])
        );
    }
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">Difference (Gy)</text>"#, H / 2.0, H / 2.0);
    s.push_str("</svg>\n");
    s
}
