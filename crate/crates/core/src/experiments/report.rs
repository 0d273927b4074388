//! Report artifacts: `curve.csv`, `table2.csv`/`table2.txt`, `report.json`
//! and SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::fusion::Table2Row;
use super::train::TrainReport;
use super::ExperimentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model: String,
    pub horizon: usize,
    pub nmse: f64,
}

/// Flattens per-model curves (index 0 = horizon 1) into CSV rows.
pub fn curve_rows(curves: &[(String, Vec<f64>)]) -> Vec<CurveRow> {
    curves
        .iter()
        .flat_map(|(name, c)| {
            c.iter().enumerate().map(move |(i, &nmse)| CurveRow {
                model: name.clone(),
                horizon: i + 1,
                nmse,
            })
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Columns `model,horizon,nmse`.
pub fn write_curve_csv(path: impl AsRef<Path>, rows: &[CurveRow]) -> Result<(), ExperimentError> {
    write_csv(path.as_ref(), rows)
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurveRow>, ExperimentError> {
    read_csv(path.as_ref())
}

/// Columns `method,scene,nmse,cosine`.
pub fn write_table2_csv(path: impl AsRef<Path>, rows: &[Table2Row]) -> Result<(), ExperimentError> {
    write_csv(path.as_ref(), rows)
}

pub fn read_table2_csv(path: impl AsRef<Path>) -> Result<Vec<Table2Row>, ExperimentError> {
    read_csv(path.as_ref())
}

/// Table with one row per method and origin/new columns for each metric.
pub fn format_table2(rows: &[Table2Row]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let cell = |m: &str, scene: &str, nmse: bool| {
        rows.iter()
            .find(|r| r.method == m && r.scene == scene)
            .map_or("-".to_string(), |r| format!("{:.4}", if nmse { r.nmse } else { r.cosine }))
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>14} {:>14} {:>12} {:>12}",
        "method", "cosine origin", "cosine new", "nmse origin", "nmse new"
    );
    for m in methods {
        let _ = writeln!(
            out,
            "{:<10} {:>14} {:>14} {:>12} {:>12}",
            m,
            cell(m, "origin", false),
            cell(m, "new", false),
            cell(m, "origin", true),
            cell(m, "new", true)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub train_configs: BTreeMap<String, serde_json::Value>,
    pub model_configs: BTreeMap<String, serde_json::Value>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub scene_ids: BTreeMap<String, String>,
    pub horizon_nmse: BTreeMap<String, Vec<f64>>,
    pub table2: Vec<Table2Row>,
    pub training: BTreeMap<String, TrainReport>,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Line plot of several named series against `x = 1, 2, ...`, log-scaled y.
pub fn write_line_svg(
    path: impl AsRef<Path>,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<f64>)],
) -> Result<(), ExperimentError> {
    let plot_err = |e: String| ExperimentError::Plot(e);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(1);
    let vals = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| *v > 0.0 && v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo / 1.5, hi * 1.5) } else { (1e-3, 1.0) };
    let root = SVGBackend::new(path.as_ref(), (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(1f64..n as f64, (lo..hi).log_scale())
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0 && v.is_finite())
            .map(|(x, &y)| ((x + 1) as f64, y))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let rows = curve_rows(&[("gpt".into(), vec![0.1, 0.25])]);
        let p = dir.path().join("curve.csv");
        write_curve_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("model,horizon,nmse\n"));
        assert_eq!(read_curve_csv(&p).unwrap(), rows);

        let t = vec![Table2Row {
            method: "fusion".into(),
            scene: "origin".into(),
            nmse: 0.01,
            cosine: 0.99,
        }];
        let p = dir.path().join("table2.csv");
        write_table2_csv(&p, &t).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("method,scene,nmse,cosine\n"));
        assert_eq!(read_table2_csv(&p).unwrap(), t);
        assert!(format_table2(&t).contains("0.0100"));
    }

    #[test]
    fn svg_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.svg");
        write_line_svg(&p, "t", "x", "y", &[("a".into(), vec![0.5, 0.2, 0.1])]).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("<svg"));
    }
}
