//! Multi-run aggregation: combine per-iteration CSV traces from several
//! seeds into mean ± std series, Table-style summaries over N runs.

use std::path::Path;

use crate::error::{FairdclError, Result};

/// Sample mean and standard deviation (n−1 denominator; std is 0 for a
/// single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// A per-checkpoint series aggregated across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSeries {
    pub xs: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Combine runs sampled on the same x-grid. Errors with "inconsistent
/// schedules" when the grids differ.
pub fn aggregate_series(runs: &[(Vec<u64>, Vec<f64>)]) -> Result<AggregatedSeries> {
    if runs.is_empty() {
        return Err(FairdclError::Config("no runs to aggregate".into()));
    }
    let xs = &runs[0].0;
    for (rx, ry) in runs {
        if rx != xs || ry.len() != xs.len() {
            return Err(FairdclError::Config("inconsistent schedules".into()));
        }
    }
    let mut mean = Vec::with_capacity(xs.len());
    let mut std = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let col: Vec<f64> = runs.iter().map(|(_, y)| y[i]).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        std.push(s);
    }
    Ok(AggregatedSeries {
        xs: xs.clone(),
        mean,
        std,
    })
}

fn csv_err(e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> FairdclError {
    FairdclError::Io(std::io::Error::other(e))
}

/// Read two named columns from a headed CSV as (x, y) pairs.
pub fn read_series(path: &Path, x_col: &str, y_col: &str) -> Result<(Vec<u64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FairdclError::Config(format!("{}: missing column '{name}'", path.display())))
    };
    let (xi, yi) = (find(x_col)?, find(y_col)?);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        xs.push(
            rec[xi]
                .parse::<u64>()
                .map_err(|e| FairdclError::Config(format!("bad value in '{x_col}': {e}")))?,
        );
        ys.push(
            rec[yi]
                .parse::<f64>()
                .map_err(|e| FairdclError::Config(format!("bad value in '{y_col}': {e}")))?,
        );
    }
    Ok((xs, ys))
}

/// Aggregate the same (x, y) columns across one CSV per run.
pub fn aggregate_csv_runs(
    paths: &[std::path::PathBuf],
    x_col: &str,
    y_col: &str,
) -> Result<AggregatedSeries> {
    let runs: Result<Vec<_>> = paths.iter().map(|p| read_series(p, x_col, y_col)).collect();
    aggregate_series(&runs?)
}

/// Write `x,mean,std` rows.
pub fn write_aggregate_csv(series: &AggregatedSeries, x_name: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([x_name, "mean", "std"]).map_err(csv_err)?;
    for i in 0..series.xs.len() {
        w.write_record([
            series.xs[i].to_string(),
            format!("{:.9}", series.mean[i]),
            format!("{:.9}", series.std[i]),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One metric column aggregated across runs at every checkpoint; used for
/// the Table-style summary (`iter,metric,mean,std` rows).
pub fn write_metric_table(
    paths: &[std::path::PathBuf],
    metrics: &[&str],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iter", "metric", "mean", "std"])
        .map_err(csv_err)?;
    for m in metrics {
        let agg = aggregate_csv_runs(paths, "iter", m)?;
        for i in 0..agg.xs.len() {
            w.write_record([
                agg.xs[i].to_string(),
                m.to_string(),
                format!("{:.9}", agg.mean[i]),
                format!("{:.9}", agg.std[i]),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
