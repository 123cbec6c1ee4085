use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{AblationCell, CellResult, EvaluationReport};
use crate::model::Variant;

/// Paths produced by [`write_reports`].
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub cell_reports: Vec<PathBuf>,
    pub csv: PathBuf,
    pub table: PathBuf,
    pub charts: Vec<PathBuf>,
}

fn cell_file_name(cell: &AblationCell) -> String {
    format!("report_{}_e{}_s{}.json", cell.variant.as_str().to_ascii_lowercase(), cell.epochs, cell.seed)
}

fn ordered<T: Copy + PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn find(cells: &[AblationCell], variant: Variant, epochs: usize) -> Option<&AblationCell> {
    cells.iter().find(|c| c.variant == variant && c.epochs == epochs)
}

/// Plain-text comparison table: one block per metric, one row per epoch
/// budget, one column per variant.
pub fn render_table(cells: &[AblationCell]) -> String {
    let variants = ordered(cells.iter().map(|c| c.variant));
    let budgets = ordered(cells.iter().map(|c| c.epochs));
    type Column = (&'static str, fn(&EvaluationReport) -> f64);
    let metrics: [Column; 4] = [
        ("Accuracy", |r| r.accuracy),
        ("Precision", |r| r.precision),
        ("Recall", |r| r.recall),
        ("F1", |r| r.f1),
    ];
    let mut out = String::new();
    let _ = write!(out, "{:<10} {:<6}", "Metric", "Epochs");
    for v in &variants {
        let _ = write!(out, " {:>9}", v.as_str());
    }
    out.push('\n');
    let width = 17 + 10 * variants.len();
    for (name, get) in metrics {
        out.push_str(&"-".repeat(width));
        out.push('\n');
        for (i, &e) in budgets.iter().enumerate() {
            let label = if i == 0 { name } else { "" };
            let _ = write!(out, "{:<10} {:<6}", label, format!("E{e}"));
            for &v in &variants {
                let cell = match find(cells, v, e) {
                    Some(c) => match c.report() {
                        Some(r) => format!("{:.4}", get(r)),
                        None => "failed".to_string(),
                    },
                    None => "-".to_string(),
                };
                let _ = write!(out, " {cell:>9}");
            }
            out.push('\n');
        }
    }
    out
}

fn render_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from(
        "variant,epochs,seed,status,accuracy,precision,recall,f1,train_seconds,predict_seconds,test_size,config_hash,error\n",
    );
    for c in cells {
        let _ = match &c.result {
            CellResult::Ok { report: r, .. } => writeln!(
                out,
                "{},{},{},ok,{:.6},{:.6},{:.6},{:.6},{:.3},{:.3},{},{},",
                c.variant.as_str(),
                c.epochs,
                c.seed,
                r.accuracy,
                r.precision,
                r.recall,
                r.f1,
                r.train_seconds,
                r.predict_seconds,
                r.test_size,
                r.config_hash.as_deref().unwrap_or("")
            ),
            CellResult::Failed { error } => writeln!(
                out,
                "{},{},{},failed,,,,,,,,,\"{}\"",
                c.variant.as_str(),
                c.epochs,
                c.seed,
                error.replace('"', "\"\"").replace('\n', " ")
            ),
        };
    }
    out
}

fn io_err(e: impl std::fmt::Display) -> io::Error {
    io::Error::other(e.to_string())
}

/// Grouped bar chart of one timing per variant (x) and budget (bar colour).
fn timing_chart(path: &Path, cells: &[AblationCell], title: &str, get: fn(&EvaluationReport) -> f64) -> io::Result<()> {
    let variants = ordered(cells.iter().map(|c| c.variant));
    let budgets = ordered(cells.iter().map(|c| c.epochs));
    let max = cells.iter().filter_map(|c| c.report()).map(get).fold(0.0f64, f64::max);
    let y_max = if max > 0.0 { max * 1.15 } else { 1.0 };
    let groups = variants.len().max(1) as f64;
    let nb = budgets.len().max(1) as f64;

    let root = SVGBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(io_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0..groups, 0.0..y_max)
        .map_err(io_err)?;
    let names: Vec<String> = variants.iter().map(|v| v.as_str().to_string()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(variants.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = (*x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                names.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("seconds")
        .draw()
        .map_err(io_err)?;

    let bar = 0.8 / nb;
    for (j, &e) in budgets.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        let bars: Vec<Rectangle<(f64, f64)>> = variants
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| {
                let r = find(cells, v, e)?.report()?;
                let x0 = i as f64 + 0.1 + j as f64 * bar;
                Some(Rectangle::new([(x0, 0.0), (x0 + bar, get(r))], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(io_err)?
            .label(format!("E{e}"))
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(io_err)?;
    root.present().map_err(io_err)?;
    Ok(())
}

/// Writes one JSON per cell, an aggregate CSV, the text table and two SVG
/// timing charts into `dir`. Every name carries the split seed.
pub fn write_reports(dir: &Path, cells: &[AblationCell], seed: u64) -> io::Result<ReportFiles> {
    std::fs::create_dir_all(dir)?;
    let mut files = ReportFiles::default();
    for cell in cells {
        let path = dir.join(cell_file_name(cell));
        let json = serde_json::to_string_pretty(cell).map_err(io_err)?;
        std::fs::write(&path, json + "\n")?;
        files.cell_reports.push(path);
    }
    files.csv = dir.join(format!("ablation_s{seed}.csv"));
    std::fs::write(&files.csv, render_csv(cells))?;
    files.table = dir.join(format!("table_s{seed}.txt"));
    std::fs::write(&files.table, render_table(cells))?;
    for (name, title, get) in [
        ("train_time", "Training time", (|r: &EvaluationReport| r.train_seconds) as fn(&EvaluationReport) -> f64),
        ("predict_time", "Prediction time", |r: &EvaluationReport| r.predict_seconds),
    ] {
        let path = dir.join(format!("{name}_s{seed}.svg"));
        timing_chart(&path, cells, title, get)?;
        files.charts.push(path);
    }
    Ok(files)
}
