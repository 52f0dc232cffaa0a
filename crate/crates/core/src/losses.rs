//! Task and auxiliary calibration losses.
//!
//! Every loss takes softmax probabilities and integer labels and returns the
//! batch-mean value together with its gradient with respect to the logits
//! that produced those probabilities.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Focal {
        #[serde(default = "default_focal_gamma")]
        gamma: f64,
    },
    LabelSmoothing {
        #[serde(default = "default_smoothing")]
        alpha: f64,
    },
    Brier,
}

fn default_focal_gamma() -> f64 {
    2.0
}

fn default_smoothing() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    #[default]
    None,
    Dca,
    Mdca,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad_logits: Array2<f64>,
}

/// Pulls a gradient with respect to probabilities back through softmax:
/// `dL/dz_i = p_i ∘ (g_i - <g_i, p_i>)`.
fn through_softmax(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((p, g), mut o) in probs
        .rows()
        .into_iter()
        .zip(grad_probs.rows())
        .zip(out.rows_mut())
    {
        let inner: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for ((o, &p), &g) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *o = p * (g - inner);
        }
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
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

pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> LossValue {
    let n = probs.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(LOG_CLAMP).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n);
    LossValue {
        loss: loss / n,
        grad_logits: grad,
    }
}

pub fn focal(probs: &Array2<f64>, labels: &[usize], gamma: f64) -> LossValue {
    if gamma == 0.0 {
        return cross_entropy(probs, labels);
    }
    let n = probs.nrows() as f64;
    let mut loss = 0.0;
    let mut grad_p = Array2::zeros(probs.dim());
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        let log_p = p.max(LOG_CLAMP).ln();
        let q = (1.0 - p).max(0.0);
        let modulator = q.powf(gamma);
        loss -= modulator * log_p;
        // d/dp of -(1-p)^γ log p; the first term vanishes at p = 1.
        let d_mod = if q > 0.0 { gamma * q.powf(gamma - 1.0) * log_p } else { 0.0 };
        let d_log = if p > LOG_CLAMP { modulator / p } else { 0.0 };
        grad_p[[i, y]] = (d_mod - d_log) / n;
    }
    LossValue {
        loss: loss / n,
        grad_logits: through_softmax(probs, &grad_p),
    }
}

pub fn label_smoothing(probs: &Array2<f64>, labels: &[usize], alpha: f64) -> LossValue {
    let (n, k) = probs.dim();
    let off = alpha / (k as f64 - 1.0);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..k {
            let q = if j == y { 1.0 - alpha } else { off };
            loss -= q * probs[[i, j]].max(LOG_CLAMP).ln();
            // Targets sum to one, so the softmax pull-back is p - q.
            grad[[i, j]] -= q;
        }
    }
    grad.mapv_inplace(|v| v / n as f64);
    LossValue {
        loss: loss / n as f64,
        grad_logits: grad,
    }
}

pub fn brier(probs: &Array2<f64>, labels: &[usize]) -> LossValue {
    let (n, k) = probs.dim();
    let mut loss = 0.0;
    let mut grad_p = Array2::zeros((n, k));
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..k {
            let r = probs[[i, j]] - if j == y { 1.0 } else { 0.0 };
            loss += r * r;
            grad_p[[i, j]] = 2.0 * r / n as f64;
        }
    }
    LossValue {
        loss: loss / n as f64,
        grad_logits: through_softmax(probs, &grad_p),
    }
}

/// `|mean(correct) - mean(max confidence)|` over the batch. Accuracy
/// indicators are constants; gradient flows through the confidences only.
pub fn dca(probs: &Array2<f64>, labels: &[usize]) -> LossValue {
    let n = probs.nrows() as f64;
    let mut acc = 0.0;
    let mut conf = 0.0;
    let mut predicted = Vec::with_capacity(labels.len());
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let j = argmax(row);
        predicted.push(j);
        conf += row[j];
        if j == y {
            acc += 1.0;
        }
    }
    let gap = acc / n - conf / n;
    let s = sign(gap);
    let mut grad_p = Array2::zeros(probs.dim());
    if s != 0.0 {
        for (i, &j) in predicted.iter().enumerate() {
            grad_p[[i, j]] = -s / n;
        }
    }
    LossValue {
        loss: gap.abs(),
        grad_logits: through_softmax(probs, &grad_p),
    }
}

/// Class-wise DCA: `(1/K) Σ_j |mean(onehot_j) - mean(p_j)|`.
pub fn mdca(probs: &Array2<f64>, labels: &[usize]) -> LossValue {
    let (n, k) = probs.dim();
    let mut gaps = vec![0.0; k];
    for &y in labels {
        gaps[y] += 1.0;
    }
    for (j, gap) in gaps.iter_mut().enumerate() {
        *gap = *gap / n as f64 - probs.column(j).sum() / n as f64;
    }
    let loss = gaps.iter().map(|g| g.abs()).sum::<f64>() / k as f64;
    let scale = (n * k) as f64;
    let mut grad_p = Array2::zeros((n, k));
    for (j, &gap) in gaps.iter().enumerate() {
        grad_p.column_mut(j).fill(-sign(gap) / scale);
    }
    LossValue {
        loss,
        grad_logits: through_softmax(probs, &grad_p),
    }
}

pub fn task_loss(kind: LossKind, probs: &Array2<f64>, labels: &[usize]) -> LossValue {
    match kind {
        LossKind::CrossEntropy => cross_entropy(probs, labels),
        LossKind::Focal { gamma } => focal(probs, labels, gamma),
        LossKind::LabelSmoothing { alpha } => label_smoothing(probs, labels, alpha),
        LossKind::Brier => brier(probs, labels),
    }
}

pub fn aux_loss(kind: AuxKind, probs: &Array2<f64>, labels: &[usize]) -> Option<LossValue> {
    match kind {
        AuxKind::None => None,
        AuxKind::Dca => Some(dca(probs, labels)),
        AuxKind::Mdca => Some(mdca(probs, labels)),
    }
}

/// `task + beta * aux`, value and gradient alike.
pub fn combined(
    task: LossKind,
    aux: AuxKind,
    beta: f64,
    probs: &Array2<f64>,
    labels: &[usize],
) -> LossValue {
    let mut out = task_loss(task, probs, labels);
    if beta == 0.0 {
        return out;
    }
    if let Some(cal) = aux_loss(aux, probs, labels) {
        out.loss += beta * cal.loss;
        out.grad_logits.scaled_add(beta, &cal.grad_logits);
    }
    out
}
