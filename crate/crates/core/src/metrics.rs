//! Accuracy, confusion matrices, per-class scores and an inference timer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{logits, ModelWeights};
use crate::tensor::Real;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Header row of predicted class names, then one row per true class.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn confusion(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        for (what, v) in [("prediction", p), ("label", l)] {
            if v >= num_classes {
                return Err(Error::Index {
                    what,
                    index: v,
                    bound: num_classes,
                });
            }
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Zero whenever a denominator is zero.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> ClassReport {
    let c = cm.num_classes();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let row: u64 = cm.counts[k].iter().sum();
            let col: u64 = (0..c).map(|r| cm.counts[r][k]).sum();
            let precision = ratio(tp, col);
            let recall = ratio(tp, row);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: row,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c.max(1) as f64;
    ClassReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    }
}

/// Everything `metrics.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub class_names: Vec<String>,
    pub examples: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub classes: ClassReport,
}

impl MetricsDocument {
    pub fn new(
        class_names: &[String],
        predictions: &[usize],
        labels: &[usize],
        loss: f64,
    ) -> Result<Self> {
        let cm = confusion(predictions, labels, class_names.len())?;
        Ok(Self {
            class_names: class_names.to_vec(),
            examples: labels.len(),
            accuracy: accuracy(predictions, labels)?,
            loss,
            classes: per_class_metrics(&cm),
            confusion: cm,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub median_seconds: f64,
    pub p95_seconds: f64,
    pub hardware: String,
}

pub const MIN_REPETITIONS: usize = 10;
pub const MIN_WARMUP: usize = 3;

/// Host description from `/proc/cpuinfo` when available.
pub fn hardware_description() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model} ({cpus} logical CPUs, {})", std::env::consts::OS)
}

/// Median of a sorted slice; mean of the middle pair for even lengths.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Single-example inference latency on the calling thread.
pub fn time_inference<T: Real>(
    weights: &ModelWeights<T>,
    example: &LabeledExample,
    repetitions: usize,
    warmup: usize,
) -> Result<TimingReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let warmup = warmup.max(MIN_WARMUP);
    for _ in 0..warmup {
        logits(weights, &[example])?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(logits(weights, &[example])?);
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    Ok(TimingReport {
        batch_size: 1,
        repetitions,
        warmup,
        median_seconds: median(&samples),
        p95_seconds: percentile(&samples, 0.95),
        hardware: hardware_description(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&xs, 0.95), 19.0);
        assert_eq!(percentile(&[4.0], 0.95), 4.0);
    }
}
