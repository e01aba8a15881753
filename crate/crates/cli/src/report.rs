//! Density-matrix bar charts and merit tables, as HTML (inline SVG) or text.

use std::collections::BTreeMap;
use std::fmt::Write;

use tbqudit::harness::MeanStd;
use tbqudit::metrics::MeritReport;
use tbqudit::qudit::DensityOperator;

/// One table row: label, value, optional spread.
pub struct Row {
    pub label: &'static str,
    pub value: f64,
    pub std: Option<f64>,
}

const ROWS: [(&str, &str); 7] = [
    ("Fidelity", "fidelity"),
    ("Trace distance", "trace_distance"),
    ("Linear entropy", "linear_entropy"),
    ("Von Neumann entropy (bits)", "von_neumann_entropy"),
    ("Conditional entropy H(S|I)", "conditional_entropy_idler"),
    ("Conditional entropy H(I|S)", "conditional_entropy_signal"),
    ("Coherent information", "coherent_information"),
];

fn merit_value(m: &MeritReport, key: &str) -> f64 {
    match key {
        "fidelity" => m.fidelity,
        "trace_distance" => m.trace_distance,
        "linear_entropy" => m.linear_entropy,
        "von_neumann_entropy" => m.von_neumann_entropy,
        "conditional_entropy_idler" => m.conditional_entropy_idler,
        "conditional_entropy_signal" => m.conditional_entropy_signal,
        "coherent_information" => m.coherent_information,
        _ => f64::NAN,
    }
}

/// Rows for a single state, or mean ± std when trial statistics are given.
pub fn merit_rows(merit: &MeritReport, stats: Option<&BTreeMap<String, MeanStd>>) -> Vec<Row> {
    ROWS.iter()
        .map(|&(label, key)| match stats.and_then(|s| s.get(key)) {
            Some(ms) => Row {
                label,
                value: ms.mean,
                std: Some(ms.std),
            },
            None => Row {
                label,
                value: merit_value(merit, key),
                std: None,
            },
        })
        .collect()
}

/// |jk⟩ with j the signal and k the idler time bin.
fn ket_label(i: usize) -> String {
    format!("{}{}", i / 4, i % 4)
}

fn fmt_row(r: &Row) -> String {
    match r.std {
        Some(s) => format!("{:.4} ± {:.4}", r.value, s),
        None => format!("{:.4}", r.value),
    }
}

pub fn text(rho: &DensityOperator, phi: f64, rows: &[Row]) -> String {
    let m = rho.matrix();
    let d = rho.dim();
    let mut out = String::new();
    let _ = writeln!(out, "Reconstructed state, target phase removed (phi = {phi:.4} rad)");
    for (name, part) in [("Re", 0usize), ("Im", 1)] {
        let _ = writeln!(out, "\n{name}(rho), elements with magnitude >= 0.005");
        for i in 0..d {
            for j in 0..d {
                let z = m[(i, j)];
                let v = if part == 0 { z.re } else { z.im };
                if v.abs() < 0.005 {
                    continue;
                }
                let len = (v.abs() * 160.0).round() as usize;
                let bar = if v >= 0.0 { "#".repeat(len) } else { "-".repeat(len) };
                let _ = writeln!(out, "  |{}><{}|  {:+.4}  {}", ket_label(i), ket_label(j), v, bar);
            }
        }
    }
    let _ = writeln!(out, "\nFigures of merit");
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0);
    for r in rows {
        let _ = writeln!(out, "  {:<width$}  {}", r.label, fmt_row(r));
    }
    out
}

fn svg_chart(out: &mut String, title: &str, rho: &DensityOperator, imag: bool) {
    let d = rho.dim();
    let cell = 34.0;
    let half = cell * 0.45;
    let (left, top) = (40.0, 30.0);
    let w = left + cell * d as f64 + 10.0;
    let h = top + cell * d as f64 + 10.0;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="9">"#
    );
    let _ = writeln!(out, r#"<text x="{left}" y="16" font-size="13">{title}</text>"#);
    for i in 0..d {
        let y = top + cell * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="4" y="{:.1}">{}</text>"#,
            y + cell / 2.0 + 3.0,
            ket_label(i)
        );
        for j in 0..d {
            let x = left + cell * j as f64;
            let z = rho.matrix()[(i, j)];
            let v = if imag { z.im } else { z.re };
            // Bars are scaled so that 0.25, the largest ideal element, fills half a cell.
            let len = (v.abs() / 0.25 * half).min(half);
            let base = y + cell / 2.0;
            let (by, color) = if v >= 0.0 {
                (base - len, "#3b6fb6")
            } else {
                (base, "#c8553d")
            };
            let _ = writeln!(
                out,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="none" stroke="#ddd"/><rect x="{:.1}" y="{by:.2}" width="{:.1}" height="{len:.2}" fill="{color}"><title>|{}&gt;&lt;{}| {v:+.4}</title></rect>"##,
                x + cell * 0.3,
                cell * 0.4,
                ket_label(i),
                ket_label(j),
            );
        }
    }
    let _ = writeln!(out, "</svg>");
}

pub fn html(rho: &DensityOperator, phi: f64, rows: &[Row]) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Reconstructed state</title>\n");
    out.push_str("<style>body{font-family:sans-serif;margin:2em}td,th{padding:2px 10px;text-align:left}</style>\n");
    out.push_str("</head><body>\n");
    let _ = writeln!(
        out,
        "<h1>Reconstructed state</h1>\n<p>Target phase removed: phi = {phi:.4} rad.</p>"
    );
    svg_chart(&mut out, "Re(rho)", rho, false);
    svg_chart(&mut out, "Im(rho)", rho, true);
    out.push_str("<h2>Figures of merit</h2>\n<table>\n");
    for r in rows {
        let _ = writeln!(out, "<tr><th>{}</th><td>{}</td></tr>", r.label, fmt_row(r));
    }
    out.push_str("</table>\n</body></html>\n");
    out
}
