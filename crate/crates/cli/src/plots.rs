//! Curve CSVs and minimal SVG line charts for run and compare reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use routelab::train::{CompareReport, RunReport};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One named curve; index is the step.
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

/// An SVG polyline chart of `series` against the step index. Non-finite
/// points are skipped.
pub fn line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let steps = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (steps - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{hi:.4}</text>"#, 4.0, y1 + 4.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{lo:.4}</text>"#, 4.0, y0 + 4.0);
    let _ = writeln!(svg, r#"<text x="{x0}" y="{}" font-size="11">0</text>"#, y0 + 16.0);
    let _ = writeln!(svg, r#"<text x="{x1}" y="{}" text-anchor="end" font-size="11">{}</text>"#, y0 + 16.0, steps - 1);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x1 - 110.0, x1 - 90.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, x1 - 84.0, ly + 4.0, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A report loaded from disk.
pub enum AnyReport {
    Run(Box<RunReport>),
    Compare(CompareReport),
}

impl AnyReport {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        if let Ok(c) = serde_json::from_str::<CompareReport>(text) {
            return Ok(AnyReport::Compare(c));
        }
        let run = serde_json::from_str::<RunReport>(text).context("input is neither a run nor a compare report")?;
        Ok(AnyReport::Run(Box::new(run)))
    }
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(())
}

/// Writes `loss.csv`, `diagnostics.csv` and one chart per curve into `dir`.
pub fn emit_plots(report: &AnyReport, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let runs: Vec<(String, &RunReport)> = match report {
        AnyReport::Run(r) => {
            write(dir, "loss.csv", &r.loss_csv(), &mut written)?;
            write(dir, "diagnostics.csv", &r.diagnostics_csv(), &mut written)?;
            vec![(r.mode.to_string(), &**r)]
        }
        AnyReport::Compare(c) => {
            write(dir, "loss.csv", &c.loss_csv(), &mut written)?;
            write(dir, "diagnostics.csv", &c.diagnostics_csv(), &mut written)?;
            write(dir, "summary.csv", &c.summary_csv(), &mut written)?;
            c.labels().into_iter().zip(&c.runs).collect()
        }
    };
    type Curve = fn(&RunReport) -> Vec<f64>;
    let charts: [(&str, &str, Curve); 4] = [
        ("loss", "train loss", |r| r.train_loss.clone()),
        ("drop_ratio", "drop ratio", |r| r.diagnostics.iter().map(|d| d.drop_ratio).collect()),
        ("experts_per_sequence", "experts per sequence", |r| {
            r.diagnostics.iter().map(|d| d.experts_per_sequence).collect()
        }),
        ("load_cv", "load cv", |r| r.diagnostics.iter().map(|d| d.load_cv).collect()),
    ];
    for (name, label, extract) in charts {
        let series: Vec<Series> = runs
            .iter()
            .map(|(n, r)| Series {
                name: n.clone(),
                values: extract(r),
            })
            .collect();
        write(dir, &format!("{name}.svg"), &line_chart(label, label, &series), &mut written)?;
    }
    Ok(written)
}
