//! Report emission: comparison tables in CSV and Markdown, per-case detail,
//! and minimal SVG line charts for sweep curves.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::OrganClass;
use crate::error::TrainError;
use crate::metrics::{CaseReport, EvalReport};

fn organ_ids() -> impl Iterator<Item = u8> {
    OrganClass::ORGANS.iter().map(|o| o.id() as u8)
}

/// Headline comparison table: per-model averages plus per-organ DSC, in the
/// fixed organ column order.
pub fn summary_table_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("Model,DSC(%),HD(mm)");
    for organ in OrganClass::ORGANS {
        let _ = write!(out, ",{}", organ.display_name());
    }
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name},{:.2},{:.2}", report.mean_dsc_pct, report.mean_hd);
        for id in organ_ids() {
            let _ = write!(out, ",{:.2}", report.per_organ[&id].dsc_pct);
        }
        out.push('\n');
    }
    out
}

/// Module-ablation table: averages plus (DSC, HD) pairs for every organ —
/// 2 + 8x2 numeric columns per row.
pub fn module_table_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("Model,Average DSC(%),Average HD(mm)");
    for organ in OrganClass::ORGANS {
        let _ = write!(
            out,
            ",{} DSC,{} HD",
            organ.display_name(),
            organ.display_name()
        );
    }
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name},{:.2},{:.2}", report.mean_dsc_pct, report.mean_hd);
        for id in organ_ids() {
            let s = &report.per_organ[&id];
            let _ = write!(out, ",{:.2},{:.2}", s.dsc_pct, s.hd);
        }
        out.push('\n');
    }
    out
}

pub fn module_table_md(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("| Model | DSC(%) | HD(mm) |");
    for organ in OrganClass::ORGANS {
        let _ = write!(out, " {} DSC | {} HD |", organ.display_name(), organ.display_name());
    }
    out.push('\n');
    out.push_str("|---|---|---|");
    for _ in 0..16 {
        out.push_str("---|");
    }
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(
            out,
            "| {name} | {:.2} | {:.2} |",
            report.mean_dsc_pct, report.mean_hd
        );
        for id in organ_ids() {
            let s = &report.per_organ[&id];
            let _ = write!(out, " {:.2} | {:.2} |", s.dsc_pct, s.hd);
        }
        out.push('\n');
    }
    out
}

/// Skip-layer ablation table: one checkmark column per layer plus the
/// averaged metrics.
pub fn skip_table_csv(rows: &[(BTreeSet<u8>, EvalReport)]) -> String {
    let mut out = String::from("1st layer,2nd layer,3rd layer,DSC(%),HD(mm)\n");
    for (layers, report) in rows {
        for l in 1..=3u8 {
            let _ = write!(out, "{},", if layers.contains(&l) { "yes" } else { "" });
        }
        let _ = writeln!(out, "{:.2},{:.2}", report.mean_dsc_pct, report.mean_hd);
    }
    out
}

pub fn skip_table_md(rows: &[(BTreeSet<u8>, EvalReport)]) -> String {
    let mut out = String::from(
        "| 1st layer | 2nd layer | 3rd layer | DSC(%) | HD(mm) |\n|---|---|---|---|---|\n",
    );
    for (layers, report) in rows {
        out.push_str("| ");
        for l in 1..=3u8 {
            let _ = write!(out, "{} | ", if layers.contains(&l) { "x" } else { " " });
        }
        let _ = writeln!(out, "{:.2} | {:.2} |", report.mean_dsc_pct, report.mean_hd);
    }
    out
}

/// Per-case detail rows: every organ of every case, with the empty-mask
/// policy flag.
pub fn per_case_csv(cases: &[CaseReport]) -> String {
    let mut out = String::from("case,organ,dsc,hd,hd95,empty_mask_policy\n");
    for case in cases {
        for (id, r) in &case.organs {
            let organ = OrganClass::from_id(*id as usize).expect("organ id");
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{}",
                case.case_id,
                organ.name(),
                r.dsc,
                r.hd,
                r.hd95,
                if r.flagged { "yes" } else { "no" }
            );
        }
    }
    out
}

/// Loss-weight sweep rows.
pub fn sweep_csv(rows: &[((f64, f64), EvalReport)]) -> String {
    let mut out = String::from("w_c,w_d,DSC(%),HD(mm)\n");
    for ((wc, wd), report) in rows {
        let _ = writeln!(
            out,
            "{wc},{wd},{:.2},{:.2}",
            report.mean_dsc_pct, report.mean_hd
        );
    }
    out
}

/// A small static line chart with one polyline per series, value labels at
/// the points, and the x labels along the bottom.
pub fn write_line_chart_svg(
    path: &Path,
    title: &str,
    x_labels: &[String],
    series: &[(&str, Vec<f64>, &str)],
) -> Result<(), TrainError> {
    let (width, height) = (640.0f64, 400.0f64);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        width / 2.0
    );

    let n = x_labels.len().max(1);
    let x_of = |i: usize| left + plot_w * (i as f64 + 0.5) / n as f64;

    for (si, (name, values, color)) in series.iter().enumerate() {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let y_of = |v: f64| top + plot_h * (1.0 - (v - lo) / span);
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x_of(i), y_of(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for (i, &v) in values.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x_of(i),
                y_of(v)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.2}</text>"#,
                x_of(i),
                y_of(v) - 7.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>"#,
            left + 10.0 + 120.0 * si as f64,
            height - 8.0
        );
    }
    for (i, label) in x_labels.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            x_of(i),
            height - bottom + 18.0
        );
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path, svg)?;
    Ok(())
}
