//! Pixel confusion counts, the six segmentation metrics and their CSV form.
//!
//! Each metric is a single division of two exact integers, so results do not
//! depend on summation order.

use std::fmt::Write as _;

use lsenet_tensor::Element;

use crate::error::{arg_err, dim_err, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, o: ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Binarizes `pred` with `p >= threshold` and counts against a binary target.
pub fn confusion_counts<T: Element>(
    pred: &[T],
    target: &[T],
    threshold: f64,
) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return dim_err(format!(
            "prediction has {} pixels, target {}",
            pred.len(),
            target.len()
        ));
    }
    let th = T::lit(threshold);
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let actual = if t == T::one() {
            true
        } else if t == T::zero() {
            false
        } else {
            return arg_err(format!("target pixel {i} is {t}, expected 0 or 1"));
        };
        match (p >= th, actual) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricReport {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub fdr: f64,
    pub kappa: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = [
        "dice",
        "sensitivity",
        "specificity",
        "accuracy",
        "fdr",
        "kappa",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.dice,
            self.sensitivity,
            self.specificity,
            self.accuracy,
            self.fdr,
            self.kappa,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            dice: v[0],
            sensitivity: v[1],
            specificity: v[2],
            accuracy: v[3],
            fdr: v[4],
            kappa: v[5],
        }
    }
}

fn ratio(num: u128, den: u128, sentinel: f64) -> f64 {
    if den == 0 {
        sentinel
    } else {
        num as f64 / den as f64
    }
}

/// Degenerate denominators: fdr = 0 with no predicted positives, sensitivity
/// = 1 with no actual positives, specificity = 1 with no actual negatives,
/// dice = 1 when both masks are empty and kappa = 1 when both masks are
/// constant and equal.
pub fn metrics_from_counts(c: ConfusionCounts) -> Result<MetricReport> {
    let n = c.total() as u128;
    if n == 0 {
        return arg_err("metrics over zero pixels");
    }
    let (tp, fp, tn, fn_) = (c.tp as u128, c.fp as u128, c.tn as u128, c.fn_ as u128);
    let chance = (tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp);
    // kappa = (n·(tp+tn) - chance) / (n² - chance), numerator may be negative
    let kappa = match n * n - chance {
        0 => 1.0,
        den => ((n * (tp + tn)) as i128 - chance as i128) as f64 / den as f64,
    };
    Ok(MetricReport {
        dice: ratio(2 * tp, 2 * tp + fp + fn_, 1.0),
        sensitivity: ratio(tp, tp + fn_, 1.0),
        specificity: ratio(tn, tn + fp, 1.0),
        accuracy: ratio(tp + tn, n, 1.0),
        fdr: ratio(fp, tp + fp, 0.0),
        kappa,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub sample: String,
    pub report: MetricReport,
}

/// Per-metric mean and sample standard deviation (zero for a single row).
pub fn aggregate(reports: &[MetricReport]) -> Result<(MetricReport, MetricReport)> {
    if reports.is_empty() {
        return arg_err("cannot aggregate zero reports");
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 6];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = [0.0; 6];
    if reports.len() > 1 {
        for r in reports {
            for ((s, v), m) in sd.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m).powi(2);
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    Ok((
        MetricReport::from_values(mean),
        MetricReport::from_values(sd),
    ))
}

pub fn csv_header() -> String {
    format!("dataset,sample,{}", MetricReport::NAMES.join(","))
}

pub fn csv_row(row: &MetricRow) -> String {
    let mut s = format!("{},{}", row.dataset, row.sample);
    for v in row.report.values() {
        let _ = write!(s, ",{v:.4}");
    }
    s
}

/// Header, one line per row and a trailing `mean±sd` line.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let reports: Vec<_> = rows.iter().map(|r| r.report).collect();
    let (mean, sd) = aggregate(&reports)?;
    let mut out = csv_header();
    out.push('\n');
    for r in rows {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    let dataset = rows.first().map(|r| r.dataset.as_str()).unwrap_or("");
    let _ = write!(out, "{dataset},mean±sd");
    for (m, s) in mean.values().iter().zip(sd.values()) {
        let _ = write!(out, ",{m:.4}±{s:.4}");
    }
    out.push('\n');
    Ok(out)
}
