use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricKind;
use crate::models::Variant;

/// One finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub variant: Variant,
    pub action_ratio: f64,
    /// Loss weight when it was swept; `None` for the variant default.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub seed: u64,
    pub metric: MetricKind,
    pub value: f64,
    #[serde(default)]
    pub success: Option<f64>,
    #[serde(default)]
    pub wall_clock_s: f64,
}

impl ExperimentRow {
    fn key(&self) -> (Variant, u64, Option<u64>, u64) {
        (self.variant, self.action_ratio.to_bits(), self.lambda.map(f64::to_bits), self.seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    /// Adds a row; a second row for the same cell and seed is rejected.
    pub fn push(&mut self, row: ExperimentRow) -> Result<()> {
        if self.rows.iter().any(|r| r.key() == row.key()) {
            return Err(Error::usage(format!(
                "duplicate row for {} ratio {} lambda {:?} seed {}",
                row.variant, row.action_ratio, row.lambda, row.seed
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Mean and population standard deviation over the seeds of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub action_ratio: f64,
    pub lambda: Option<f64>,
    pub metric: MetricKind,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub success_mean: Option<f64>,
    /// `mean - mean(LAPO)`, absent without a LAPO cell.
    pub improvement_vs_lapo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<Cell>,
}

impl Summary {
    pub fn cell(&self, variant: Variant, ratio: f64, lambda: Option<f64>) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.action_ratio == ratio && c.lambda == lambda)
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Per-cell statistics. The LAPO reference of a cell is the LAPO cell at the
/// same ratio, or the only LAPO cell if there is exactly one (LAPO ignores
/// labels).
pub fn aggregate_experiments(table: &ExperimentTable) -> Result<Summary> {
    if table.is_empty() {
        return Err(Error::usage("no experiment rows"));
    }
    let mut groups: BTreeMap<(Variant, u64, Option<u64>), Vec<&ExperimentRow>> = BTreeMap::new();
    for r in &table.rows {
        groups
            .entry((r.variant, r.action_ratio.to_bits(), r.lambda.map(f64::to_bits)))
            .or_default()
            .push(r);
    }
    let mut cells: Vec<Cell> = groups
        .values()
        .map(|rows| {
            let first = rows[0];
            let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
            let (mean, std) = mean_std(&values);
            let succ: Vec<f64> = rows.iter().filter_map(|r| r.success).collect();
            Cell {
                variant: first.variant,
                action_ratio: first.action_ratio,
                lambda: first.lambda,
                metric: first.metric,
                n: rows.len(),
                mean,
                std,
                success_mean: (succ.len() == rows.len()).then(|| mean_std(&succ).0),
                improvement_vs_lapo: None,
            }
        })
        .collect();
    let lapo: Vec<(f64, f64)> = cells
        .iter()
        .filter(|c| c.variant == Variant::Lapo && c.lambda.is_none())
        .map(|c| (c.action_ratio, c.mean))
        .collect();
    for c in &mut cells {
        let same = lapo.iter().find(|(r, _)| *r == c.action_ratio);
        let reference = same.or(if lapo.len() == 1 { lapo.first() } else { None });
        c.improvement_vs_lapo = reference.map(|(_, m)| c.mean - m);
    }
    Ok(Summary { cells })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Raw table with header `variant,action_ratio,seed,metric,value`.
pub fn write_table_csv(table: &ExperimentTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["variant", "action_ratio", "seed", "metric", "value"])
        .map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        let metric = match r.metric {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mse => "mse",
        };
        w.write_record([
            r.variant.name().to_string(),
            r.action_ratio.to_string(),
            r.seed.to_string(),
            metric.to_string(),
            r.value.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_series(
    summary: &Summary,
    path: &Path,
    x_name: &str,
    x: impl Fn(&Cell) -> Option<f64>,
) -> Result<usize> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["variant", x_name, "mean", "std", "n"])
        .map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<(&str, f64, &Cell)> = summary
        .cells
        .iter()
        .filter_map(|c| x(c).map(|v| (c.variant.name(), v, c)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1)));
    for (name, v, c) in &rows {
        w.write_record([
            name.to_string(),
            v.to_string(),
            c.mean.to_string(),
            c.std.to_string(),
            c.n.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

/// Metric against action ratio per variant, for cells at the default weight.
pub fn write_ratio_series(summary: &Summary, path: impl AsRef<Path>) -> Result<usize> {
    write_series(summary, path.as_ref(), "action_ratio", |c| {
        c.lambda.is_none().then_some(c.action_ratio)
    })
}

/// Metric against the swept loss weight per variant.
pub fn write_lambda_series(summary: &Summary, path: impl AsRef<Path>) -> Result<usize> {
    write_series(summary, path.as_ref(), "lambda", |c| c.lambda)
}
