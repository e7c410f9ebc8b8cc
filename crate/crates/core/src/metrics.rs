//! Confusion counts, precision/recall/F1 and fold confidence intervals.
//! The tiger class is the positive class.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::dataset::Class;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("at least two values are needed, got {0}")]
    TooFewValues(usize),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, pred: Class, label: Class) {
        match (pred, label) {
            (Class::Tiger, Class::Tiger) => self.tp += 1,
            (Class::NonTiger, Class::NonTiger) => self.tn += 1,
            (Class::Tiger, Class::NonTiger) => self.fp += 1,
            (Class::NonTiger, Class::Tiger) => self.fn_ += 1,
        }
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn confusion(preds: &[Class], labels: &[Class]) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in preds.iter().zip(labels) {
        c.add(p, l);
    }
    Ok(c)
}

/// Metrics derived from confusion counts. Undefined ratios (0/0) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mean_loss: Option<f64>,
    pub ci_halfwidth: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn eq4_metrics(counts: ConfusionCounts) -> MetricsReport {
    let ConfusionCounts { tp, tn, fp, fn_ } = counts;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    MetricsReport {
        counts,
        accuracy: ratio(tp + tn, counts.total()),
        precision,
        recall,
        f1,
        mean_loss: None,
        ci_halfwidth: None,
    }
}

impl MetricsReport {
    pub fn with_loss(mut self, mean_loss: f64) -> Self {
        self.mean_loss = Some(mean_loss);
        self
    }

    pub const CSV_HEADER: [&'static str; 9] = ["architecture", "n", "tp", "tn", "fp", "fn", "precision", "recall", "f1"];

    /// One row in the layout of the per-architecture results table.
    pub fn csv_row(&self, architecture: &str) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let c = &self.counts;
        vec![
            architecture.to_string(),
            c.total().to_string(),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            opt(self.precision),
            opt(self.recall),
            opt(self.f1),
        ]
    }
}

/// Writes a header and one row per `(architecture, report)`.
pub fn write_table_csv<W: std::io::Write>(out: W, rows: &[(&str, &MetricsReport)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MetricsReport::CSV_HEADER)?;
    for (arch, report) in rows {
        w.write_record(report.csv_row(arch))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// 1.96 · s / √k
    #[default]
    Normal,
    /// t quantile with k − 1 degrees of freedom.
    StudentT,
}

impl CiMethod {
    pub fn critical_value(self, k: usize) -> f64 {
        match self {
            CiMethod::Normal => 1.96,
            CiMethod::StudentT => StudentsT::new(0.0, 1.0, (k - 1) as f64)
                .expect("k ≥ 2")
                .inverse_cdf(0.975),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub halfwidth: f64,
}

/// Size-weighted mean of `values` and a 95% half-width from their unweighted
/// sample standard deviation.
pub fn ci95(values: &[f64], sizes: &[usize], method: CiMethod) -> Result<Interval> {
    if values.len() != sizes.len() {
        return Err(MetricsError::LengthMismatch {
            preds: values.len(),
            labels: sizes.len(),
        });
    }
    let k = values.len();
    if k < 2 {
        return Err(MetricsError::TooFewValues(k));
    }
    let total: usize = sizes.iter().sum();
    let mean = if total == 0 {
        values.iter().sum::<f64>() / k as f64
    } else {
        values.iter().zip(sizes).map(|(v, &n)| v * n as f64).sum::<f64>() / total as f64
    };
    let plain = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - plain).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(Interval {
        mean,
        halfwidth: method.critical_value(k) * var.sqrt() / (k as f64).sqrt(),
    })
}
