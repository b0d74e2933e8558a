//! Results tables: one row per (strategy, seed) plus one summary row per strategy.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::ValidationError;

pub const COLUMNS: [&str; 8] = ["row", "strategy", "seed", "return", "failed", "n", "mean", "std"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Episode,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub row: RowKind,
    pub strategy: String,
    pub seed: Option<u64>,
    #[serde(rename = "return")]
    pub total_return: Option<f64>,
    /// 0/1 on episode rows; the number of excluded episodes on summary rows.
    pub failed: usize,
    pub n: Option<usize>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl ResultRow {
    pub fn episode(strategy: &str, seed: u64, total_return: f64, failed: bool) -> Self {
        Self {
            row: RowKind::Episode,
            strategy: strategy.to_string(),
            seed: Some(seed),
            total_return: (!failed).then_some(total_return),
            failed: usize::from(failed),
            n: None,
            mean: None,
            std: None,
        }
    }
}

/// Mean and population standard deviation; `None` for an empty sample.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Summary rows for every strategy, in order of first appearance.
pub fn summarize(episodes: &[ResultRow]) -> Vec<ResultRow> {
    let mut order: Vec<&str> = Vec::new();
    for row in episodes.iter().filter(|r| r.row == RowKind::Episode) {
        if !order.contains(&row.strategy.as_str()) {
            order.push(&row.strategy);
        }
    }
    order
        .into_iter()
        .map(|strategy| {
            let rows: Vec<&ResultRow> = episodes
                .iter()
                .filter(|r| r.row == RowKind::Episode && r.strategy == strategy)
                .collect();
            let returns: Vec<f64> = rows.iter().filter_map(|r| r.total_return).collect();
            let failed = rows.iter().map(|r| r.failed).sum();
            let stats = mean_std(&returns);
            ResultRow {
                row: RowKind::Summary,
                strategy: strategy.to_string(),
                seed: None,
                total_return: None,
                failed,
                n: Some(returns.len()),
                mean: stats.map(|s| s.0),
                std: stats.map(|s| s.1),
            }
        })
        .collect()
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ValidationError(format!("cannot read {}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    for (i, expected) in COLUMNS.iter().enumerate() {
        match headers.get(i) {
            Some(found) if found == *expected => {}
            Some(found) => {
                return Err(ValidationError(format!(
                    "{}: column {} is `{found}`, expected `{expected}`",
                    path.display(),
                    i + 1
                ))
                .into())
            }
            None => {
                return Err(ValidationError(format!("{}: missing column `{expected}`", path.display())).into())
            }
        }
    }
    if let Some(extra) = headers.get(COLUMNS.len()) {
        return Err(ValidationError(format!("{}: unexpected column `{extra}`", path.display())).into());
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| ValidationError(format!("{}: {e}", path.display())).into())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotPoint {
    pub strategy: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub fn plot_points(summaries: &[ResultRow]) -> Vec<PlotPoint> {
    summaries
        .iter()
        .map(|s| PlotPoint {
            strategy: s.strategy.clone(),
            mean: s.mean,
            std: s.std,
        })
        .collect()
}

pub fn write_plot_data(path: &Path, points: &[PlotPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_known_values() {
        let rows = vec![
            ResultRow::episode("a", 0, 1.0, false),
            ResultRow::episode("a", 1, 3.0, false),
            ResultRow::episode("b", 0, 5.0, false),
            ResultRow::episode("a", 2, 0.0, true),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].n, s[0].mean, s[0].std, s[0].failed), (Some(2), Some(2.0), Some(1.0), 1));
        assert_eq!((s[1].n, s[1].mean, s[1].std), (Some(1), Some(5.0), Some(0.0)));
    }

    #[test]
    fn all_failed_has_no_statistics() {
        let s = summarize(&[ResultRow::episode("a", 0, 0.0, true)]);
        assert_eq!((s[0].n, s[0].mean, s[0].failed), (Some(0), None, 1));
    }

    #[test]
    fn round_trip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut rows = vec![ResultRow::episode("pbs", 3, 2.5, false)];
        rows.extend(summarize(&rows));
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_rows(&path).unwrap(), rows);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "row,strategy,seed,score,failed,n,mean,std\n").unwrap();
        let err = read_rows(&bad).unwrap_err().to_string();
        assert!(err.contains("`score`") && err.contains("`return`"), "{err}");
    }
}
