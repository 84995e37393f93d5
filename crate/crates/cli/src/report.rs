//! CSV tables and the Kaplan-Meier figure.

use std::fmt::Write as _;
use std::path::Path;

use protomiss_core::metrics::{KmAnalysis, KmCurve};

use crate::error::{CliError, Result};

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Shortest round-tripping decimal; `nan` for missing metrics.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{}", v)
    }
}

pub fn mean_pm_std(mean: f64, std: f64) -> String {
    format!("{:.3}±{:.3}", mean, std)
}

fn steps(curve: &KmCurve, t_max: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 1.0)];
    let mut s = 1.0;
    for (&t, &v) in curve.times.iter().zip(&curve.survival) {
        pts.push((t, s));
        pts.push((t, v));
        s = v;
    }
    pts.push((t_max, s));
    pts
}

/// Two step curves, high risk in red and low risk in blue, with the log-rank
/// p-value and hazard ratio in the corner.
pub fn km_svg(a: &KmAnalysis, t_max: f64) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let t_max = if t_max > 0.0 { t_max } else { 1.0 };
    let x = |t: f64| pad + (w - 2.0 * pad) * t / t_max;
    let y = |s: f64| h - pad - (h - 2.0 * pad) * s;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{:.1},{:.1}" stroke="black" fill="none"/>"#,
        x(0.0),
        y(1.0),
        x(0.0),
        y(0.0),
        x(t_max),
        y(0.0)
    );
    for (curve, colour, label) in [(&a.high, "#c0392b", "high risk"), (&a.low, "#2471a3", "low risk")] {
        let d: Vec<String> = steps(curve, t_max).iter().map(|&(t, s)| format!("{:.1},{:.1}", x(t), y(s))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" stroke="{}" stroke-width="1.5" fill="none"><title>{}</title></polyline>"#, d.join(" "), colour, label);
    }
    let hr = a.cox.map_or("HR n/a".to_string(), |c| format!("HR {:.2} [{:.2}, {:.2}]", c.hazard_ratio, c.ci_low, c.ci_high));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">log-rank p = {:.3e}; {}; n = {} / {}</text>"#,
        x(0.0) + 8.0,
        pad - 12.0,
        a.logrank.p_value,
        hr,
        a.n_high,
        a.n_low
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">months</text>"#, w / 2.0, h - 8.0);
    out.push_str("</svg>\n");
    out
}
