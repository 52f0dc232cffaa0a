//! Datasets and client partitioning.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{FedCalError, Result};
use crate::model::Batch;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FedCalError::DimensionMismatch {
                context: "dataset labels",
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FedCalError::Partition(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Class means: unit basis vectors when `d >= K`, otherwise evenly spaced
/// points on the unit circle in the first two coordinates.
pub fn class_means(num_classes: usize, dim: usize) -> Array2<f64> {
    let mut means = Array2::zeros((num_classes, dim));
    if dim >= num_classes {
        for c in 0..num_classes {
            means[[c, c]] = 1.0;
        }
    } else {
        for c in 0..num_classes {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            means[[c, 0]] = angle.cos();
            means[[c, 1]] = angle.sin();
        }
    }
    means
}

/// Isotropic Gaussian blobs around [`class_means`], grouped by class.
pub fn synth_gaussian(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(FedCalError::config("dataset.classes", "need at least 2 classes"));
    }
    if dim < 2 {
        return Err(FedCalError::config("dataset.dim", "need at least 2 features"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FedCalError::config("dataset.spread", "must be finite and >= 0"));
    }
    let means = class_means(num_classes, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = num_classes * n_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for s in 0..n_per_class {
            let row = c * n_per_class + s;
            for j in 0..dim {
                features[[row, j]] = means[[c, j]] + spread * noise.sample(&mut rng);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Disjoint, covering `[0, n)`, and no client left empty.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for client in &self.clients {
            if client.is_empty() {
                return false;
            }
            for &i in client {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn partition(dataset: &Dataset, clients: usize, scheme: PartitionScheme, seed: u64) -> Result<PartitionPlan> {
    match scheme {
        PartitionScheme::Iid => iid_partition(dataset, clients, seed),
        PartitionScheme::Dirichlet { alpha } => dirichlet_partition(dataset, clients, alpha, seed),
    }
}

/// Shuffles each class and deals it round-robin. The deal continues across
/// classes so leftovers spread evenly over clients.
pub fn iid_partition(dataset: &Dataset, clients: usize, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 || clients > dataset.len() {
        return Err(FedCalError::Partition(format!(
            "cannot split {} samples across {clients} clients",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = vec![Vec::new(); clients];
    let mut next = 0;
    for mut members in dataset.indices_by_class() {
        members.shuffle(&mut rng);
        for i in members {
            plan[next].push(i);
            next = (next + 1) % clients;
        }
    }
    Ok(PartitionPlan {
        clients: plan,
        scheme: PartitionScheme::Iid,
        seed,
    })
}

/// Per-class label skew: for each class draw `p ~ Dir(alpha · 1_M)` and send
/// each of its samples to a client drawn from `p`.
pub fn dirichlet_partition(dataset: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedCalError::config("partition.alpha", "must be finite and > 0"));
    }
    if clients == 0 || clients > dataset.len() {
        return Err(FedCalError::Partition(format!(
            "cannot split {} samples across {clients} clients",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedCalError::Partition(e.to_string()))?;
    let mut plan = vec![Vec::new(); clients];
    for members in dataset.indices_by_class() {
        let proportions = sample_dirichlet(&gamma, clients, &mut rng);
        let mut cumulative = Vec::with_capacity(clients);
        let mut acc = 0.0;
        for p in &proportions {
            acc += p;
            cumulative.push(acc);
        }
        for i in members {
            let u: f64 = rng.random::<f64>() * acc;
            let client = cumulative.partition_point(|&c| c <= u).min(clients - 1);
            plan[client].push(i);
        }
    }
    // Refill empty clients from whichever client is currently largest.
    while let Some(empty) = plan.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by_key(|&c| (plan[c].len(), std::cmp::Reverse(c)))
            .unwrap();
        let moved = plan[largest].pop().unwrap();
        plan[empty].push(moved);
    }
    for client in &mut plan {
        client.sort_unstable();
    }
    Ok(PartitionPlan {
        clients: plan,
        scheme: PartitionScheme::Dirichlet { alpha },
        seed,
    })
}

fn sample_dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // Every draw underflowed; this only happens for tiny alpha.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, message: impl Into<String>) -> FedCalError {
    FedCalError::IdxFormat {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, "truncated header"))
}

/// Parses an IDX image file (`0x00000803`, n × rows × cols, u8 pixels).
pub fn parse_idx_images(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<Array2<f64>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(path, format!("bad magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}")));
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let pixels = rows * cols;
    let take = limit.map_or(count, |l| l.min(count));
    let body = &bytes[16..];
    if body.len() < count * pixels {
        return Err(idx_err(
            path,
            format!("truncated: header declares {count} images of {pixels} bytes, body has {} bytes", body.len()),
        ));
    }
    Ok(Array2::from_shape_fn((take, pixels), |(i, j)| body[i * pixels + j] as f64 / 255.0))
}

/// Parses an IDX label file (`0x00000801`). Returns the header count and labels.
pub fn parse_idx_labels(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<(usize, Vec<usize>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(path, format!("bad magic 0x{magic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}")));
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(idx_err(path, format!("truncated: header declares {count} labels, body has {}", body.len())));
    }
    let take = limit.map_or(count, |l| l.min(count));
    Ok((count, body[..take].iter().map(|&b| b as usize).collect()))
}

pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let image_bytes = std::fs::read(images).map_err(|e| FedCalError::io(images, e))?;
    let label_bytes = std::fs::read(labels).map_err(|e| FedCalError::io(labels, e))?;
    let image_count = read_u32(&image_bytes, 4, images)? as usize;
    let features = parse_idx_images(&image_bytes, images, limit)?;
    let (label_count, ys) = parse_idx_labels(&label_bytes, labels, limit)?;
    if label_count != image_count {
        return Err(idx_err(
            labels,
            format!("count mismatch: {image_count} images but {label_count} labels"),
        ));
    }
    let num_classes = ys.iter().copied().max().map_or(10, |m| (m + 1).max(10));
    Dataset::new(features, ys, num_classes)
}
