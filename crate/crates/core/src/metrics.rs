//! Accuracy aggregation, tables and plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normal-approximation 95% quantile.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no accuracies to aggregate")]
    Empty,
    #[error("nothing to report")]
    NoReports,
    #[error("cannot parse `{0}` as mean±halfwidth")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub halfwidth: f64,
    /// Set when a single task leaves the spread undefined; halfwidth is 0.
    pub undefined_spread: bool,
}

/// Mean and `1.96·s/√T` with the Bessel-corrected sample deviation `s`.
pub fn mean_ci(accs: &[f64]) -> Result<MeanCi, MetricsError> {
    if accs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let t = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / t;
    if accs.len() == 1 {
        return Ok(MeanCi { mean, halfwidth: 0.0, undefined_spread: true });
    }
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (t - 1.0);
    Ok(MeanCi { mean, halfwidth: Z95 * var.sqrt() / t.sqrt(), undefined_spread: false })
}

/// Aggregated few-shot accuracy of one method on one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub source: String,
    pub target: String,
    pub n: usize,
    pub k: usize,
    pub k_q: usize,
    pub seed: u64,
    pub task_accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub undefined_spread: bool,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: &str,
        source: &str,
        target: &str,
        n: usize,
        k: usize,
        k_q: usize,
        seed: u64,
        task_accuracies: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        let ci = mean_ci(&task_accuracies)?;
        Ok(Self {
            method: method.into(),
            source: source.into(),
            target: target.into(),
            n,
            k,
            k_q,
            seed,
            task_accuracies,
            mean: ci.mean,
            ci95: ci.halfwidth,
            undefined_spread: ci.undefined_spread,
        })
    }

    pub fn tasks(&self) -> usize {
        self.task_accuracies.len()
    }

    /// Mean accuracy in percent.
    pub fn percent(&self) -> f64 {
        100.0 * self.mean
    }

    pub fn display(&self) -> String {
        format_pm(self.mean, self.ci95)
    }
}

/// Percent with two decimals and the table convention of dropping a leading
/// zero on the halfwidth: `(0.6893, 0.0084)` → `68.93±.84`.
pub fn format_pm(mean: f64, halfwidth: f64) -> String {
    let hw = format!("{:.2}", 100.0 * halfwidth);
    let hw = hw.strip_prefix('0').unwrap_or(&hw);
    format!("{:.2}±{hw}", 100.0 * mean)
}

/// Inverse of [`format_pm`], returning fractions.
pub fn parse_pm(s: &str) -> Result<(f64, f64), MetricsError> {
    let bad = || MetricsError::Parse(s.to_string());
    let (m, h) = s.trim().split_once('±').ok_or_else(bad)?;
    let m: f64 = m.trim().parse().map_err(|_| bad())?;
    let h = h.trim();
    let h: f64 = if h.starts_with('.') { format!("0{h}") } else { h.to_string() }.parse().map_err(|_| bad())?;
    Ok((m / 100.0, h / 100.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: [&str; 9] = ["method", "source", "target", "n", "k", "T", "mean", "ci95", "seed"];

pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.source.clone(),
            r.target.clone(),
            r.n.to_string(),
            r.k.to_string(),
            r.tasks().to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.ci95),
            r.seed.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

pub fn reports_to_json(reports: &[EvalReport]) -> Result<String, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    Ok(serde_json::to_string_pretty(reports).expect("reports serialize"))
}

pub fn write_report(reports: &[EvalReport], format: ReportFormat, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let text = match format {
        ReportFormat::Csv => reports_to_csv(reports)?,
        ReportFormat::Json => reports_to_json(reports)?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Plain-text table with `mean±ci` cells.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:<10} {:<10} {:>5} {:>12}", "method", "target", "shots", "T", "acc");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<28} {:<10} {:<10} {:>5} {:>12}",
            r.method,
            r.target,
            format!("{}w{}s", r.n, r.k),
            r.tasks(),
            r.display()
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// One polyline per shot setting across the report categories, with a
    /// dashed line per shot setting for `transfer` reports.
    StageTrend,
    /// Grouped bars per category, one bar per shot setting.
    AblationBars,
}

const BASELINE: &str = "transfer";
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 120.0;
const PAD_T: f64 = 30.0;
const PAD_B: f64 = 70.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG 1.1. Categories are the report methods (excluding the
/// baseline) in first-seen order; series are shot settings.
pub fn render_plot(reports: &[EvalReport], kind: PlotKind) -> Result<String, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let mut cats: Vec<&str> = Vec::new();
    let mut shots: Vec<usize> = Vec::new();
    for r in reports {
        if r.method != BASELINE && !cats.contains(&r.method.as_str()) {
            cats.push(&r.method);
        }
        if !shots.contains(&r.k) {
            shots.push(r.k);
        }
    }
    shots.sort_unstable();
    let vals: Vec<f64> = reports.iter().map(EvalReport::percent).collect();
    let lo = (vals.iter().cloned().fold(f64::INFINITY, f64::min) / 5.0).floor() * 5.0;
    let hi = ((vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / 5.0).ceil() * 5.0).max(lo + 5.0);
    let (pw, ph) = (W - PAD_L - PAD_R, H - PAD_T - PAD_B);
    let y = |v: f64| PAD_T + ph * (1.0 - (v - lo) / (hi - lo));
    let slot = pw / cats.len().max(1) as f64;
    let cx = |i: usize| PAD_L + slot * (i as f64 + 0.5);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    // axes and horizontal grid
    let mut tick = lo;
    while tick <= hi + 1e-9 {
        let ty = y(tick);
        let _ = writeln!(s, r##"<line x1="{PAD_L:.2}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="#dddddd"/>"##, PAD_L + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{tick:.0}</text>"#, PAD_L - 6.0, ty + 4.0);
        tick += 5.0;
    }
    let _ = writeln!(
        s,
        r#"<path d="M{PAD_L:.2},{PAD_T:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        PAD_T + ph,
        PAD_L + pw
    );
    for (i, c) in cats.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-30 {:.2} {:.2})">{}</text>"#,
            cx(i),
            PAD_T + ph + 16.0,
            cx(i),
            PAD_T + ph + 16.0,
            xml_escape(c)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">accuracy (%)</text>"#,
        PAD_T + ph / 2.0,
        PAD_T + ph / 2.0
    );

    let find = |method: &str, k: usize| reports.iter().find(|r| r.method == method && r.k == k);
    for (si, &k) in shots.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        match kind {
            PlotKind::StageTrend => {
                let pts: Vec<String> = cats
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| find(c, k).map(|r| format!("{:.2},{:.2}", cx(i), y(r.percent()))))
                    .collect();
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
                for p in &pts {
                    let (px, py) = p.split_once(',').unwrap();
                    let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
                }
            }
            PlotKind::AblationBars => {
                let bw = slot * 0.8 / shots.len() as f64;
                for (i, c) in cats.iter().enumerate() {
                    if let Some(r) = find(c, k) {
                        let x0 = cx(i) - slot * 0.4 + bw * si as f64;
                        let top = y(r.percent());
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x0:.2}" y="{top:.2}" width="{bw:.2}" height="{:.2}" fill="{color}"/>"#,
                            PAD_T + ph - top
                        );
                    }
                }
            }
        }
        if let Some(b) = find(BASELINE, k) {
            let by = y(b.percent());
            let _ = writeln!(
                s,
                r#"<line x1="{PAD_L:.2}" y1="{by:.2}" x2="{:.2}" y2="{by:.2}" stroke="{color}" stroke-dasharray="6,4"/>"#,
                PAD_L + pw
            );
        }
        let ly = PAD_T + 16.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{k}-shot</text>"#,
            W - PAD_R + 10.0,
            W - PAD_R + 30.0,
            W - PAD_R + 36.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
