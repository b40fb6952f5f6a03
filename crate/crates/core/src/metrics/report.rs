//! Cross-run aggregation into a Table-1-shaped report, and its CSV and text
//! renderings.
//!
//! Cells (per dataset, variant and metric) hold percentages rounded to two
//! decimals, exactly as printed. Dataset scores and the suite row are derived
//! from the rounded cells; only the suite row is rounded again, for display.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{dataset_mean, round2, sample_std, suite_mean_std};
use crate::error::{Error, Result};

pub const SUMMARY_HEADER: [&str; 5] = ["dataset", "variant", "metric", "mean", "std"];

/// Variant label used when a per-run CSV has no `variant` column.
pub const DEFAULT_VARIANT: &str = "model";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricCell {
    pub metric: String,
    /// Percent, two decimals.
    pub mean: f64,
    pub std: f64,
}

/// One metric value of one run, as a fraction in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RunValue {
    pub dataset: String,
    pub variant: String,
    pub metric: String,
    pub run: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    cells: IndexMap<(String, String), Vec<MetricCell>>,
}

impl SuiteReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, dataset: &str, variant: &str, cell: MetricCell) -> Result<()> {
        if !(cell.mean.is_finite() && cell.std.is_finite()) || cell.std < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{dataset}/{variant}/{}: invalid mean {} or std {}",
                cell.metric, cell.mean, cell.std
            )));
        }
        let cells = self.cells.entry((dataset.to_string(), variant.to_string())).or_default();
        if cells.iter().any(|c| c.metric == cell.metric) {
            return Err(Error::InvalidArgument(format!(
                "duplicate cell {dataset}/{variant}/{}",
                cell.metric
            )));
        }
        cells.push(cell);
        Ok(())
    }

    /// Mean and sample std over runs, scaled to percent and rounded.
    pub fn from_runs(values: &[RunValue]) -> Result<Self> {
        let mut groups: IndexMap<(&str, &str, &str), Vec<(&str, f64)>> = IndexMap::new();
        for v in values {
            if !(0.0..=1.0).contains(&v.value) {
                return Err(Error::InvalidArgument(format!(
                    "{}/{}/{} run {}: value {} is not a fraction in [0, 1]",
                    v.dataset, v.variant, v.metric, v.run, v.value
                )));
            }
            let runs = groups.entry((&v.dataset, &v.variant, &v.metric)).or_default();
            if runs.iter().any(|(r, _)| *r == v.run) {
                return Err(Error::InvalidArgument(format!(
                    "{}/{}/{}: run {} appears twice",
                    v.dataset, v.variant, v.metric, v.run
                )));
            }
            runs.push((&v.run, v.value));
        }
        let mut report = Self::new();
        for ((dataset, variant, metric), runs) in groups {
            let pct: Vec<f64> = runs.iter().map(|(_, v)| v * 100.0).collect();
            let cell = MetricCell {
                metric: metric.to_string(),
                mean: round2(dataset_mean(&pct)?),
                std: round2(sample_std(&pct)),
            };
            report.push(dataset, variant, cell)?;
        }
        Ok(report)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Datasets in first-appearance order.
    pub fn datasets(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (d, _) in self.cells.keys() {
            if !out.contains(&d.as_str()) {
                out.push(d);
            }
        }
        out
    }

    /// Variants in first-appearance order.
    pub fn variants(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (_, v) in self.cells.keys() {
            if !out.contains(&v.as_str()) {
                out.push(v);
            }
        }
        out
    }

    pub fn cells(&self, dataset: &str, variant: &str) -> Option<&[MetricCell]> {
        self.cells
            .get(&(dataset.to_string(), variant.to_string()))
            .map(Vec::as_slice)
    }

    /// Metric-averaged mean and std of one dataset.
    pub fn dataset_score(&self, dataset: &str, variant: &str) -> Option<(f64, f64)> {
        let cells = self.cells(dataset, variant)?;
        let n = cells.len() as f64;
        let mean = cells.iter().map(|c| c.mean).sum::<f64>() / n;
        let std = cells.iter().map(|c| c.std).sum::<f64>() / n;
        Some((mean, std))
    }

    /// Unrounded suite mean and RMS std over the variant's datasets.
    pub fn suite(&self, variant: &str) -> Result<(f64, f64)> {
        let (means, stds): (Vec<f64>, Vec<f64>) = self
            .datasets()
            .into_iter()
            .filter_map(|d| self.dataset_score(d, variant))
            .unzip();
        suite_mean_std(&means, &stds)
    }

    /// Summary CSV: one row per cell under [`SUMMARY_HEADER`].
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SUMMARY_HEADER)?;
        for ((dataset, variant), cells) in &self.cells {
            for c in cells {
                w.write_record([
                    dataset.as_str(),
                    variant.as_str(),
                    c.metric.as_str(),
                    &format!("{:.2}", c.mean),
                    &format!("{:.2}", c.std),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned table: one row per dataset, one column per variant, and a
    /// final `Mean` row.
    pub fn to_table(&self) -> Result<String> {
        let variants = self.variants();
        let datasets = self.datasets();
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Dataset".to_string(), "Metrics".to_string()];
        header.extend(variants.iter().map(|v| v.to_string()));
        rows.push(header);

        for d in &datasets {
            let metrics = variants
                .iter()
                .find_map(|v| self.cells(d, v))
                .map(|cs| cs.iter().map(|c| c.metric.as_str()).collect::<Vec<_>>().join("/"))
                .unwrap_or_default();
            let mut row = vec![d.to_string(), metrics];
            for v in &variants {
                row.push(match self.cells(d, v) {
                    Some(cs) => cs
                        .iter()
                        .map(|c| format!("{:.2}±{:.2}", c.mean, c.std))
                        .collect::<Vec<_>>()
                        .join("/"),
                    None => "-".into(),
                });
            }
            rows.push(row);
        }

        let mut mean_row = vec![String::new(), "Mean".to_string()];
        for v in &variants {
            let (m, s) = self.suite(v)?;
            mean_row.push(format!("{:.2}±{:.2}", round2(m), round2(s)));
        }
        rows.push(mean_row);

        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        }
        Ok(out)
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

/// Parses either a summary CSV (`dataset,variant,metric,mean,std`, percent)
/// or a per-run CSV (`dataset,[variant,]metric,run,value`, fractions).
pub fn parse_report_csv(text: &str, path: &Path) -> Result<SuiteReport> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let summary = names == SUMMARY_HEADER;
    let per_run = names == ["dataset", "metric", "run", "value"]
        || names == ["dataset", "variant", "metric", "run", "value"];
    if !summary && !per_run {
        return Err(Error::parse(
            path,
            1,
            format!(
                "unrecognized header {names:?}; expected dataset,variant,metric,mean,std or dataset,[variant,]metric,run,value"
            ),
        ));
    }

    let mut report = SuiteReport::new();
    let mut runs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let field = |name: &str| -> &str { column(&headers, name).and_then(|c| rec.get(c)).unwrap_or("") };
        let number = |name: &str| -> Result<f64> {
            field(name)
                .parse::<f64>()
                .map_err(|_| Error::parse(path, line, format!("`{name}` is not a number: `{}`", field(name))))
        };
        if field("dataset").is_empty() || field("metric").is_empty() {
            return Err(Error::parse(path, line, "empty dataset or metric"));
        }
        if summary {
            let cell = MetricCell {
                metric: field("metric").to_string(),
                mean: number("mean")?,
                std: number("std")?,
            };
            report
                .push(field("dataset"), field("variant"), cell)
                .map_err(|e| Error::parse(path, line, e.to_string()))?;
        } else {
            let variant = match column(&headers, "variant") {
                Some(_) => field("variant").to_string(),
                None => DEFAULT_VARIANT.to_string(),
            };
            runs.push(RunValue {
                dataset: field("dataset").to_string(),
                variant,
                metric: field("metric").to_string(),
                run: field("run").to_string(),
                value: number("value")?,
            });
        }
    }
    if per_run {
        report = SuiteReport::from_runs(&runs)?;
    }
    if report.is_empty() {
        return Err(Error::Empty("report CSV"));
    }
    Ok(report)
}

pub fn read_report_csv(path: &Path) -> Result<SuiteReport> {
    parse_report_csv(&fs::read_to_string(path)?, path)
}
