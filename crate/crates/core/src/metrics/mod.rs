//! Evaluation metrics, best-epoch selection and the cross-dataset mean/std
//! arithmetic. Metric values are fractions in [0, 1]; reports scale them to
//! percentages and round to two decimals.

mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{parse_report_csv, read_report_csv, MetricCell, RunValue, SuiteReport, DEFAULT_VARIANT, SUMMARY_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Acc,
    /// Binary F1 of the positive class.
    F1,
    /// Unweighted mean of per-class F1.
    F1Macro,
    /// Bag-of-tokens overlap F1.
    F1Token,
    /// Binary F1 over all answer options.
    F1A,
    /// Exact-match accuracy.
    EM,
    /// Fraction of questions whose answers are all correct.
    EMq,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Acc => "acc",
            MetricKind::F1 => "f1",
            MetricKind::F1Macro => "f1_macro",
            MetricKind::F1Token => "f1_token",
            MetricKind::F1A => "f1_a",
            MetricKind::EM => "em",
            MetricKind::EMq => "em_q",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use MetricKind::*;
        [Acc, F1, F1Macro, F1Token, F1A, EM, EMq]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

fn check_lengths(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Empty(what));
    }
    if a != b {
        return Err(Error::InvalidArgument(format!("{what}: {a} predictions vs {b} labels")));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths("accuracy", preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

fn one_vs_rest_f1(preds: &[usize], labels: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

/// F1 of class 1; zero when precision + recall is zero.
pub fn f1_binary(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths("f1_binary", preds.len(), labels.len())?;
    if let Some(v) = preds.iter().chain(labels).find(|&&v| v > 1) {
        return Err(Error::InvalidArgument(format!("f1_binary: non-binary value {v}")));
    }
    Ok(one_vs_rest_f1(preds, labels, 1))
}

/// Mean one-vs-rest F1 over the classes present in `labels`.
pub fn f1_macro(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths("f1_macro", preds.len(), labels.len())?;
    if let Some(v) = preds.iter().chain(labels).find(|&&v| v >= num_classes) {
        return Err(Error::InvalidArgument(format!("f1_macro: class {v} >= {num_classes}")));
    }
    let present: Vec<usize> = (0..num_classes).filter(|c| labels.contains(c)).collect();
    let total: f64 = present.iter().map(|&c| one_vs_rest_f1(preds, labels, c)).sum();
    Ok(total / present.len() as f64)
}

/// Overlap F1 between two token bags. Two empty bags match perfectly.
pub fn f1_token<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut bag: HashMap<&str, isize> = HashMap::new();
    for t in gold {
        *bag.entry(t.as_ref()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = bag.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Index of the most probable option; ties go to the lowest index.
pub fn max_choice_select(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Empty("choice group"));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of groups in which every prediction is correct.
pub fn em_grouped(preds: &[usize], labels: &[usize], group_ids: &[usize]) -> Result<f64> {
    check_lengths("em_grouped", preds.len(), labels.len())?;
    check_lengths("em_grouped", preds.len(), group_ids.len())?;
    let mut groups: BTreeMap<usize, bool> = BTreeMap::new();
    for ((p, l), g) in preds.iter().zip(labels).zip(group_ids) {
        let ok = groups.entry(*g).or_insert(true);
        *ok &= p == l;
    }
    Ok(groups.values().filter(|&&ok| ok).count() as f64 / groups.len() as f64)
}

/// Epoch whose metrics have the highest average; ties go to the earliest.
pub fn best_epoch(epoch_scores: &[Vec<f64>]) -> Option<usize> {
    let avg = |s: &Vec<f64>| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in epoch_scores.iter().enumerate() {
        let a = avg(s);
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i)
}

/// Average of a dataset's metrics.
pub fn dataset_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("dataset metrics"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Arithmetic mean of per-dataset means and root-mean-square of per-dataset
/// standard deviations.
pub fn suite_mean_std(means: &[f64], stds: &[f64]) -> Result<(f64, f64)> {
    if means.is_empty() {
        return Err(Error::Empty("suite"));
    }
    if means.len() != stds.len() {
        return Err(Error::InvalidArgument(format!(
            "suite: {} means vs {} standard deviations",
            means.len(),
            stds.len()
        )));
    }
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let std = (stds.iter().map(|s| s * s).sum::<f64>() / n).sqrt();
    Ok((mean, std))
}

/// Sample (n - 1) standard deviation; zero for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Two-decimal rounding, ties away from zero. The decimal tie is detected
/// with a small tolerance so that values such as 0.125 printed from binary
/// floats still round up.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    let floor = scaled.abs().floor();
    let frac = scaled.abs() - floor;
    let magnitude = if (frac - 0.5).abs() < 1e-9 || frac > 0.5 { floor + 1.0 } else { floor };
    (magnitude * scaled.signum()) / 100.0
}

/// One line of a run-record file: validation metrics after an epoch, the
/// mean training loss over the epoch and the last learning rate applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn new(seed: u64) -> Self {
        Self { seed, epochs: Vec::new() }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        let scores: Vec<Vec<f64>> = self.epochs.iter().map(|e| e.metrics.values().copied().collect()).collect();
        best_epoch(&scores)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch().map(|i| &self.epochs[i])
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut epochs: Vec<EpochRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: EpochRecord = serde_json::from_str(line).map_err(|err| Error::parse(path, i + 1, err.to_string()))?;
            if let Some(first) = epochs.first() {
                if first.seed != e.seed {
                    return Err(Error::parse(path, i + 1, format!("seed {} differs from {}", e.seed, first.seed)));
                }
            }
            epochs.push(e);
        }
        let seed = epochs.first().map_or(0, |e| e.seed);
        Ok(Self { seed, epochs })
    }
}
