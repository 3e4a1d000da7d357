//! Confusion-matrix classification metrics with macro averaging.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::Network;

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|row| row.len() != k) {
            return Err(Error::Validation("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }

    fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Validation("metrics of an empty confusion matrix are undefined".into()));
        }
        Ok(())
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::Validation("need at least one class".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::Validation(format!("label pair ({t}, {p}) outside 0..{k}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Per-class values and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<f64>,
    pub macro_avg: f64,
}

impl ClassScores {
    fn from(per_class: Vec<f64>) -> Self {
        let macro_avg = per_class.iter().sum::<f64>() / per_class.len() as f64;
        ClassScores { per_class, macro_avg }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.ensure_nonempty()?;
    Ok(ratio(cm.trace(), cm.total()))
}

/// A class never predicted gets precision 0.
pub fn precision(cm: &ConfusionMatrix) -> Result<ClassScores> {
    cm.ensure_nonempty()?;
    Ok(ClassScores::from(
        (0..cm.classes()).map(|c| ratio(cm.get(c, c), cm.column_sum(c))).collect(),
    ))
}

/// A class absent from the labels gets recall 0.
pub fn recall(cm: &ConfusionMatrix) -> Result<ClassScores> {
    cm.ensure_nonempty()?;
    Ok(ClassScores::from(
        (0..cm.classes()).map(|c| ratio(cm.get(c, c), cm.row_sum(c))).collect(),
    ))
}

pub fn f1(cm: &ConfusionMatrix) -> Result<ClassScores> {
    let p = precision(cm)?;
    let r = recall(cm)?;
    Ok(ClassScores::from(
        p.per_class
            .iter()
            .zip(&r.per_class)
            .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub precision: ClassScores,
    pub recall: ClassScores,
    pub f1: ClassScores,
    /// Classes that were never predicted; their precision is reported as 0.
    pub unpredicted_classes: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        Ok(MetricsReport {
            samples: cm.total(),
            accuracy: accuracy(&cm)?,
            precision: precision(&cm)?,
            recall: recall(&cm)?,
            f1: f1(&cm)?,
            unpredicted_classes: (0..cm.classes()).filter(|&c| cm.column_sum(c) == 0).collect(),
            confusion: cm,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned per-class table followed by the macro row and accuracy.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<7} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
        for c in 0..self.confusion.classes() {
            let flag = if self.unpredicted_classes.contains(&c) { " *" } else { "" };
            let _ = writeln!(
                s,
                "{:<7} {:>9.4} {:>9.4} {:>9.4} {:>8}{flag}",
                c,
                self.precision.per_class[c],
                self.recall.per_class[c],
                self.f1.per_class[c],
                self.confusion.row_sum(c)
            );
        }
        let _ = writeln!(
            s,
            "{:<7} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            "macro", self.precision.macro_avg, self.recall.macro_avg, self.f1.macro_avg, self.samples
        );
        let _ = writeln!(s, "accuracy {:.4}", self.accuracy);
        if !self.unpredicted_classes.is_empty() {
            let _ = writeln!(s, "* never predicted; precision taken as 0");
        }
        s
    }
}

const EVAL_CHUNK: usize = 500;

/// Argmax predictions of `net` over the whole dataset, in sample order.
pub fn predictions(net: &Network, ds: &Dataset) -> Result<Vec<usize>> {
    if net.output_len() != NUM_CLASSES {
        return Err(Error::Config(format!(
            "network has {} outputs, dataset has {NUM_CLASSES} classes",
            net.output_len()
        )));
    }
    if ds.sample_len() != net.input_shape().iter().product::<usize>() {
        return Err(Error::Config(format!(
            "dataset samples {:?} do not fit network input {:?}",
            ds.sample_shape(),
            net.input_shape()
        )));
    }
    let mut preds = Vec::with_capacity(ds.len());
    for idx in ds.batches(EVAL_CHUNK, None) {
        let (x, _) = ds.gather(&idx, net.input_shape(), NUM_CLASSES)?;
        preds.extend(net.predict(&x)?.argmax_rows());
    }
    Ok(preds)
}

pub fn evaluate(net: &Network, ds: &Dataset) -> Result<MetricsReport> {
    let preds = predictions(net, ds)?;
    let labels: Vec<usize> = ds.labels().iter().map(|&l| l as usize).collect();
    MetricsReport::from_confusion(confusion_matrix(&preds, &labels, NUM_CLASSES)?)
}
