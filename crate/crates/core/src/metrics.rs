//! Accuracy, calibration error and post-hoc temperature scaling.
//!
//! Bins are the half-open intervals `((i-1)/I, i/I]`; a confidence of exactly
//! zero falls into the first bin. Empty bins contribute nothing and report
//! zero accuracy and confidence.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LOG_CLAMP;
use crate::model::{predict_logits, softmax, ParameterSet};
use crate::partition::Dataset;

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub counts: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl BinStats {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub ece: f64,
    pub sce: f64,
    pub nll: f64,
    pub num_bins: usize,
    pub bins: BinStats,
}

/// Index of the bin whose interval `((i)/I, (i+1)/I]` holds `s`.
pub fn bin_index(s: f64, bins: usize) -> usize {
    let edge = |i: usize| i as f64 / bins as f64;
    let mut idx = ((s * bins as f64).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    // Settle on the same edges a per-bin comparison would use.
    while idx > 0 && s <= edge(idx) {
        idx -= 1;
    }
    while idx + 1 < bins && s > edge(idx + 1) {
        idx += 1;
    }
    idx
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Accumulates `(confidence, hit)` pairs into bins and returns the weighted gap.
fn binned_gap(samples: impl Iterator<Item = (f64, f64)>, n: usize, bins: usize) -> (f64, BinStats) {
    let mut counts = vec![0usize; bins];
    let mut hit_sum = vec![0.0; bins];
    let mut conf_sum = vec![0.0; bins];
    for (s, hit) in samples {
        let b = bin_index(s, bins);
        counts[b] += 1;
        hit_sum[b] += hit;
        conf_sum[b] += s;
    }
    let mut accuracy = vec![0.0; bins];
    let mut confidence = vec![0.0; bins];
    let mut gap = 0.0;
    for b in 0..bins {
        if counts[b] > 0 {
            let c = counts[b] as f64;
            accuracy[b] = hit_sum[b] / c;
            confidence[b] = conf_sum[b] / c;
            gap += c / n as f64 * (accuracy[b] - confidence[b]).abs();
        }
    }
    (
        gap,
        BinStats {
            counts,
            accuracy,
            confidence,
        },
    )
}

pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Expected calibration error on the max-class confidence.
pub fn ece(probs: &Array2<f64>, labels: &[usize], bins: usize) -> (f64, BinStats) {
    let n = labels.len();
    let samples = probs.rows().into_iter().zip(labels).map(|(row, &y)| {
        let j = argmax(row);
        (row[j], if j == y { 1.0 } else { 0.0 })
    });
    binned_gap(samples, n, bins)
}

/// Static calibration error: ECE-style binning per class, averaged over classes.
pub fn sce(probs: &Array2<f64>, labels: &[usize], bins: usize) -> f64 {
    let (n, k) = probs.dim();
    let total: f64 = (0..k)
        .map(|j| {
            let samples = probs
                .column(j)
                .into_iter()
                .zip(labels)
                .map(move |(&s, &y)| (s, if y == j { 1.0 } else { 0.0 }))
                .collect::<Vec<_>>();
            binned_gap(samples.into_iter(), n, bins).0
        })
        .sum();
    total / k as f64
}

pub fn nll(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(LOG_CLAMP).ln())
        .sum();
    sum / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
    pub gap: f64,
}

pub fn reliability_export(bins: &BinStats) -> Vec<ReliabilityRow> {
    let i = bins.num_bins();
    (0..i)
        .map(|b| ReliabilityRow {
            lower: b as f64 / i as f64,
            upper: (b + 1) as f64 / i as f64,
            count: bins.counts[b],
            accuracy: bins.accuracy[b],
            confidence: bins.confidence[b],
            gap: bins.confidence[b] - bins.accuracy[b],
        })
        .collect()
}

pub fn report_from_probs(probs: &Array2<f64>, labels: &[usize], bins: usize) -> CalibrationReport {
    let (ece_value, stats) = ece(probs, labels, bins);
    CalibrationReport {
        accuracy: accuracy(probs, labels),
        ece: ece_value,
        sce: sce(probs, labels, bins),
        nll: nll(probs, labels),
        num_bins: bins,
        bins: stats,
    }
}

pub fn evaluate(params: &ParameterSet, test: &Dataset, bins: usize) -> Result<CalibrationReport> {
    let logits = predict_logits(params, test.features.view())?;
    Ok(report_from_probs(&softmax(&logits), &test.labels, bins))
}

pub fn scaled_nll(logits: &Array2<f64>, labels: &[usize], temperature: f64) -> f64 {
    nll(&softmax(&logits.mapv(|z| z / temperature)), labels)
}

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 10.0);
const GOLDEN_ITERATIONS: usize = 200;

/// Temperature minimizing mean NLL of `softmax(logits / T)`, found by
/// golden-section search over `ln T`.
pub fn temperature_scale(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let f = |log_t: f64| scaled_nll(logits, labels, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if b - a < 1e-12 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (0.5 * (a + b)).exp()
}
