//! Output directories, CSV/SVG artifacts and the summary line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gridnum::report::ConvergenceReport;

use crate::CliError;

/// Environment variable replacing the default `out` root.
pub const OUT_ENV: &str = "GRIDNUM_OUT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

/// `<root>/<scenario stem>`.
pub fn scenario_dir(scenario: &Path) -> PathBuf {
    let stem = scenario
        .file_stem()
        .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    output_root().join(stem)
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Output(dir.to_path_buf(), e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Output(path, e))
}

pub fn summary_line(method: &str, report: &ConvergenceReport) -> String {
    format!(
        "{method} {:.4} {} {:.3e}",
        report.final_objective, report.iterations, report.kkt_residual
    )
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const WIDTH: f64 = 640.0;
const PANEL: f64 = 220.0;
const MARGIN: f64 = 40.0;

struct Series {
    name: &'static str,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

/// Scales one panel's series into `[top, top + PANEL]` and appends polylines.
fn panel(out: &mut String, top: f64, label: &str, series: &[Series], x_max: f64) {
    let values = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 1.0, lo + 1.0)
    } else {
        (0.0, 1.0)
    };
    let plot_w = WIDTH - 2.0 * MARGIN;
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{top}" width="{plot_w}" height="{PANEL}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-size="12">{} [{:.4e}, {:.4e}]</text>"#,
        top - 6.0,
        escape(label),
        lo,
        hi
    );
    for s in series {
        let mut pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let px = MARGIN + plot_w * x / x_max;
                let py = top + PANEL * (1.0 - (y - lo) / (hi - lo));
                format!("{px:.2},{py:.2}")
            })
            .collect();
        if pts.len() == 1 {
            pts.push(pts[0].clone());
        }
        let _ = writeln!(
            out,
            r#"<polyline class="{0}" data-series="{0}" fill="none" stroke="{1}" stroke-width="1.5" points="{2}"/>"#,
            s.name,
            s.color,
            pts.join(" ")
        );
    }
}

/// Objective (and dual value, when logged) over iterations, with log10 of the
/// KKT residual underneath.
pub fn convergence_svg(title: &str, report: &ConvergenceReport) -> String {
    let recs = &report.iterates_logged;
    let x_max = recs.iter().map(|r| r.iter).max().unwrap_or(1).max(1) as f64;
    let finite = |v: f64| v.is_finite().then_some(v);
    let mut top = vec![Series {
        name: "objective",
        color: "#1f77b4",
        points: recs
            .iter()
            .filter_map(|r| finite(r.objective).map(|v| (r.iter as f64, v)))
            .collect(),
    }];
    if recs.iter().any(|r| r.dual.is_some()) {
        top.push(Series {
            name: "dual",
            color: "#ff7f0e",
            points: recs
                .iter()
                .filter_map(|r| r.dual.and_then(finite).map(|v| (r.iter as f64, v)))
                .collect(),
        });
    }
    let kkt = [Series {
        name: "kkt",
        color: "#d62728",
        points: recs
            .iter()
            .filter_map(|r| finite(r.kkt.max(1e-300).log10()).map(|v| (r.iter as f64, v)))
            .collect(),
    }];
    let height = 2.0 * PANEL + 3.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    panel(&mut out, MARGIN, "objective", &top, x_max);
    panel(&mut out, 2.0 * MARGIN + PANEL, "log10 kkt", &kkt, x_max);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridnum::report::{IterRecord, StopReason};

    fn report(dual: bool) -> ConvergenceReport {
        let rec = |iter: usize, objective: f64, kkt: f64| IterRecord {
            iter,
            objective,
            kkt,
            dual: dual.then_some(objective + 1.0 / iter as f64),
        };
        ConvergenceReport {
            iterates_logged: vec![rec(1, 1.0, 1.0), rec(2, 3.5, 1e-3), rec(3, 4.0, 0.0)],
            final_objective: 4.0,
            kkt_residual: 0.0,
            iterations: 3,
            stop_reason: StopReason::Kkt,
        }
    }

    #[test]
    fn one_polyline_per_series() {
        assert_eq!(
            convergence_svg("t", &report(false)).matches("<polyline").count(),
            2
        );
        assert_eq!(
            convergence_svg("t", &report(true)).matches("<polyline").count(),
            3
        );
    }

    #[test]
    fn title_is_escaped() {
        assert!(convergence_svg("a<b&c", &report(false)).contains("<title>a&lt;b&amp;c</title>"));
    }

    #[test]
    fn summary_format() {
        assert_eq!(summary_line("system", &report(false)), "system 4.0000 3 0.000e0");
    }
}
