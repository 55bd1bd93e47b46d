//! Aggregates per-task accuracies into mean ± 95% confidence interval, then
//! writes a text table, CSV, JSON and an SVG chart.
//!
//!     cargo run --example reporting

use refine::metrics::{render_plot, render_table, reports_to_csv, reports_to_json, EvalReport, PlotKind};

fn synthetic(method: &str, k: usize, level: f64) -> EvalReport {
    let accs: Vec<f64> = (0..100).map(|i| (level + 0.1 * ((i * 37 % 17) as f64 / 16.0 - 0.5)).clamp(0.0, 1.0)).collect();
    EvalReport::new(method, "source", "binarize", 5, k, 15, 0, accs).expect("non-empty")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut reports = Vec::new();
    for (k, bump) in [(1, 0.0), (5, 0.15)] {
        for (s, level) in [0.30, 0.38, 0.44, 0.41].into_iter().enumerate() {
            reports.push(synthetic(&format!("stage{}", s + 1), k, level + bump));
        }
        reports.push(synthetic("transfer", k, 0.40 + bump));
    }

    println!("{}", render_table(&reports));
    println!("{}", reports_to_csv(&reports[..2])?);
    println!("JSON: {} bytes", reports_to_json(&reports)?.len());

    let path = std::env::temp_dir().join("refine-example-stages.svg");
    std::fs::write(&path, render_plot(&reports, PlotKind::StageTrend)?)?;
    println!("chart written to {}", path.display());
    Ok(())
}
