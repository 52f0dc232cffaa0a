//! Similarity between the previous aggregate update and a client's running
//! update, mapped into `[0, 1]`.
//!
//! CKA variants are computed on `n × n` Gram matrices built from the rows of
//! each input, which makes them exactly symmetric in their two arguments.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{FedCalError, Result};
use crate::model::ParameterDelta;

const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    Cosine,
    #[serde(rename = "lcka")]
    LinearCka,
    #[serde(rename = "rbfcka")]
    RbfCka,
}

impl SimKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" | "cos" => Some(SimKind::Cosine),
            "lcka" | "linear_cka" => Some(SimKind::LinearCka),
            "rbfcka" | "rbf_cka" => Some(SimKind::RbfCka),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(v: f64) -> Self {
        Self(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<SimilarityScore> {
    if u.len() != v.len() {
        return Err(FedCalError::DimensionMismatch {
            context: "cosine",
            expected: u.len(),
            actual: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < EPS || nv < EPS {
        return Ok(SimilarityScore(0.0));
    }
    Ok(SimilarityScore::new((dot / (nu * nv)).max(0.0)))
}

fn check_rows(x: &ArrayView2<'_, f64>, y: &ArrayView2<'_, f64>, context: &'static str) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(FedCalError::DimensionMismatch {
            context,
            expected: x.nrows(),
            actual: y.nrows(),
        });
    }
    Ok(())
}

/// `H K H` with `H = I - 11ᵀ/n`.
fn double_center(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows() as f64;
    let row_means: Vec<f64> = k.rows().into_iter().map(|r| r.sum() / n).collect();
    let col_means: Vec<f64> = k.columns().into_iter().map(|c| c.sum() / n).collect();
    let grand = row_means.iter().sum::<f64>() / n;
    Array2::from_shape_fn(k.dim(), |(i, j)| k[[i, j]] - row_means[i] - col_means[j] + grand)
}

fn frobenius_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// CKA from two centered Gram matrices.
fn cka_from_centered(kc: &Array2<f64>, lc: &Array2<f64>) -> f64 {
    let kk = frobenius_inner(kc, kc);
    let ll = frobenius_inner(lc, lc);
    if kk.sqrt() < EPS || ll.sqrt() < EPS {
        return 0.0;
    }
    (frobenius_inner(kc, lc) / (kk.sqrt() * ll.sqrt())).clamp(0.0, 1.0)
}

fn linear_gram(x: &ArrayView2<'_, f64>) -> Array2<f64> {
    x.dot(&x.t())
}

/// Linear CKA, `‖ỸᵀX̃‖²_F / (‖X̃ᵀX̃‖_F ‖ỸᵀỸ‖_F)`, evaluated through the
/// equivalent centered Gram matrices.
pub fn linear_cka(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    check_rows(&x, &y, "linear_cka")?;
    let kc = double_center(&linear_gram(&x));
    let lc = double_center(&linear_gram(&y));
    Ok(cka_from_centered(&kc, &lc))
}

fn pairwise_sq_dists(x: &ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Median of the off-diagonal pairwise distances; falls back to the mean of
/// the nonzero ones when more than half are zero. `None` when all rows coincide.
fn median_bandwidth(sq: &Array2<f64>) -> Option<f64> {
    let n = sq.nrows();
    let mut dists: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| sq[[i, j]].sqrt())
        .collect();
    if dists.is_empty() {
        return None;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > EPS {
        return Some(median);
    }
    let nonzero: Vec<f64> = dists.into_iter().filter(|&d| d > EPS).collect();
    if nonzero.is_empty() {
        None
    } else {
        Some(nonzero.iter().sum::<f64>() / nonzero.len() as f64)
    }
}

/// Gaussian kernel matrix with the median-distance bandwidth.
pub fn rbf_gram(x: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let sq = pairwise_sq_dists(&x);
    let sigma = median_bandwidth(&sq)?;
    let denom = 2.0 * sigma * sigma;
    Some(sq.mapv(|d| (-d / denom).exp()))
}

/// HSIC-based CKA with Gaussian kernels.
pub fn rbf_cka(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    check_rows(&x, &y, "rbf_cka")?;
    let (Some(k), Some(l)) = (rbf_gram(x), rbf_gram(y)) else {
        return Ok(0.0);
    };
    Ok(cka_from_centered(&double_center(&k), &double_center(&l)))
}

/// Parameter-count weighted mean of per-layer similarities.
pub fn weighted_layer_mean(layers: &[(f64, usize)]) -> f64 {
    let total: usize = layers.iter().map(|&(_, c)| c).sum();
    if total == 0 {
        return 0.0;
    }
    layers.iter().map(|&(v, c)| v * c as f64).sum::<f64>() / total as f64
}

fn layer_cka(kind: SimKind, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    // A single row has nothing to center, so vectors are compared as columns.
    let (a, b) = if a.nrows() < 2 {
        (a.t(), b.t())
    } else {
        (a.view(), b.view())
    };
    match kind {
        SimKind::LinearCka => linear_cka(a, b),
        SimKind::RbfCka => rbf_cka(a, b),
        SimKind::Cosine => unreachable!("cosine is not layer-wise"),
    }
}

/// `sim(global, local)` for two parameter deltas.
pub fn delta_similarity(
    global: &ParameterDelta,
    local: &ParameterDelta,
    kind: SimKind,
) -> Result<SimilarityScore> {
    if !global.same_shape(local) {
        return Err(FedCalError::ShapeMismatch(
            "delta_similarity: deltas differ in shape".into(),
        ));
    }
    if local.is_zero() {
        return Ok(SimilarityScore(0.0));
    }
    match kind {
        SimKind::Cosine => cosine(&global.flatten(), &local.flatten()),
        SimKind::LinearCka | SimKind::RbfCka => {
            let per_layer = global
                .layer_matrices()
                .iter()
                .zip(local.layer_matrices().iter())
                .map(|(g, l)| Ok((layer_cka(kind, g, l)?, g.len())))
                .collect::<Result<Vec<_>>>()?;
            Ok(SimilarityScore::new(weighted_layer_mean(&per_layer)))
        }
    }
}

/// The similarity hook used when computing per-client penalties. `global` is
/// `None` before any aggregate exists.
pub trait DeltaSimilarity: Send + Sync {
    fn similarity(&self, global: Option<&ParameterDelta>, local: &ParameterDelta) -> Result<f64>;
}

impl DeltaSimilarity for SimKind {
    fn similarity(&self, global: Option<&ParameterDelta>, local: &ParameterDelta) -> Result<f64> {
        match global {
            None => Ok(0.0),
            Some(g) => delta_similarity(g, local, *self).map(SimilarityScore::value),
        }
    }
}
