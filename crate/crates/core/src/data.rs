//! Tabular ingestion, per-client standard scaling, Dirichlet non-IID
//! partitioning, stratified train/test splitting and synthetic long-tail
//! dataset generation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Result, SentinelError};
use crate::tensor::Tensor;

/// Feature matrix plus integer labels in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub feature_names: Option<Vec<String>>,
    /// Original label names by code, in first-appearance order.
    pub label_names: Option<Vec<String>>,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows selected by index, preserving order.
    pub fn subset(&self, indices: &[usize]) -> TabularDataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        TabularDataset {
            features: Tensor::new(vec![indices.len(), d], data).unwrap(),
            labels,
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
        }
    }
}

/// Exact per-class histogram of a dataset's labels.
pub fn class_counts(ds: &TabularDataset) -> Vec<usize> {
    let mut counts = vec![0usize; ds.num_classes];
    for &y in &ds.labels {
        counts[y] += 1;
    }
    counts
}

/// Parse a comma-separated file with a header row. The label column is
/// matched by name; string labels are coded by first appearance.
pub fn load_csv(path: &str, label_column: &str) -> Result<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SentinelError::Data(format!("cannot open {path}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| SentinelError::Data(format!("cannot read header of {path}: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            SentinelError::Data(format!(
                "label column '{label_column}' not found in {path} (columns: {})",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| SentinelError::Data(format!("row {}: {e}", row_idx + 2)))?;
        for (col_idx, field) in record.iter().enumerate() {
            if col_idx == label_idx {
                let code = match label_names.iter().position(|n| n == field) {
                    Some(c) => c,
                    None => {
                        label_names.push(field.to_string());
                        label_names.len() - 1
                    }
                };
                labels.push(code);
            } else {
                let value: f64 = field.trim().parse().map_err(|_| {
                    SentinelError::Data(format!(
                        "non-numeric feature value '{field}' at row {}, column '{}'",
                        row_idx + 2,
                        headers.get(col_idx).unwrap_or("?")
                    ))
                })?;
                data.push(value);
            }
        }
    }
    if labels.is_empty() {
        return Err(SentinelError::Data(format!("{path} contains no data rows")));
    }
    let d = feature_names.len();
    Ok(TabularDataset {
        features: Tensor::new(vec![labels.len(), d], data)?,
        num_classes: label_names.len(),
        labels,
        feature_names: Some(feature_names),
        label_names: Some(label_names),
    })
}

/// Per-feature mean and population standard deviation (floored at 1e-8).
#[derive(Debug, Clone)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_scaler(train: &TabularDataset) -> Result<ScalerParams> {
    let n = train.len();
    if n == 0 {
        return Err(SentinelError::Data("cannot fit a scaler on an empty dataset".into()));
    }
    let d = train.dim();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(train.features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(train.features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(ScalerParams { mean, std })
}

/// Z-score transform. Constant features map to exactly zero.
pub fn apply_scaler(sc: &ScalerParams, ds: &TabularDataset) -> TabularDataset {
    let mut out = ds.clone();
    let n = out.len();
    for i in 0..n {
        let row = out.features.row_mut(i);
        for ((v, &m), &s) in row.iter_mut().zip(&sc.mean).zip(&sc.std) {
            *v = if s == 0.0 { 0.0 } else { (*v - m) / s.max(1e-8) };
        }
    }
    out
}

/// Sample-to-client assignment produced by a partitioner.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub assignment: Vec<usize>,
    pub alpha: f64,
    pub num_clients: usize,
    pub min_per_client: usize,
}

impl PartitionPlan {
    /// Sample indices per client, ascending within each client.
    pub fn client_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clients];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_clients];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Total-variation distance between two discrete distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean TV distance between each client's label distribution and the
/// global one; the heterogeneity measure reported by partition inspection.
pub fn partition_heterogeneity(plan: &PartitionPlan, labels: &[usize], num_classes: usize) -> f64 {
    let mut global = vec![0.0; num_classes];
    for &y in labels {
        global[y] += 1.0;
    }
    let n = labels.len() as f64;
    for g in &mut global {
        *g /= n;
    }
    let per_client = plan.client_indices();
    let mut total = 0.0;
    for indices in &per_client {
        let mut dist = vec![0.0; num_classes];
        for &i in indices {
            dist[labels[i]] += 1.0;
        }
        if !indices.is_empty() {
            for v in &mut dist {
                *v /= indices.len() as f64;
            }
        }
        total += tv_distance(&dist, &global);
    }
    total / plan.num_clients as f64
}

const PARTITION_MAX_RETRIES: usize = 100;

/// Per-class Dirichlet split: for each class, draw proportions
/// `~ Dirichlet(alpha·1)` over clients and cut that class's shuffled
/// samples at the cumulative boundaries. Redraws entirely (bounded) when
/// any client ends below `min_per_client`.
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    alpha: f64,
    rng: &mut ChaCha12Rng,
    min_per_client: usize,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(SentinelError::InvalidArgument("num_clients must be at least 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "dirichlet alpha must be positive, got {alpha}"
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| SentinelError::InvalidArgument(format!("gamma sampler: {e}")))?;

    for _attempt in 0..PARTITION_MAX_RETRIES {
        let mut assignment = vec![0usize; labels.len()];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(rng);
            let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
            let sum: f64 = props.iter().sum();
            if sum <= 0.0 {
                // degenerate draw at tiny alpha; dump the class on one client
                let lucky = rng.random_range(0..num_clients);
                props = vec![0.0; num_clients];
                props[lucky] = 1.0;
            } else {
                for p in &mut props {
                    *p /= sum;
                }
            }
            let n = shuffled.len();
            let mut cumulative = 0.0;
            let mut start = 0usize;
            for (client, &p) in props.iter().enumerate() {
                cumulative += p;
                let end = if client + 1 == num_clients {
                    n
                } else {
                    ((cumulative * n as f64).floor() as usize).min(n)
                };
                for &sample in &shuffled[start..end] {
                    assignment[sample] = client;
                }
                start = end;
            }
        }
        let plan = PartitionPlan {
            assignment,
            alpha,
            num_clients,
            min_per_client,
        };
        if plan.client_sizes().iter().all(|&s| s >= min_per_client) {
            return Ok(plan);
        }
    }
    Err(SentinelError::Partition(format!(
        "could not give every one of {num_clients} clients at least {min_per_client} samples \
         after {PARTITION_MAX_RETRIES} draws (alpha = {alpha}, n = {})",
        labels.len()
    )))
}

/// IID mode: uniform random equal-size partition (no Dirichlet draw).
pub fn iid_partition(
    num_samples: usize,
    num_clients: usize,
    rng: &mut ChaCha12Rng,
    min_per_client: usize,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(SentinelError::InvalidArgument("num_clients must be at least 1".into()));
    }
    if num_samples / num_clients < min_per_client {
        return Err(SentinelError::Partition(format!(
            "{num_samples} samples cannot give {num_clients} clients {min_per_client} each"
        )));
    }
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(rng);
    let base = num_samples / num_clients;
    let extra = num_samples % num_clients;
    let mut assignment = vec![0usize; num_samples];
    let mut cursor = 0usize;
    for client in 0..num_clients {
        let take = base + usize::from(client < extra);
        for &sample in &order[cursor..cursor + take] {
            assignment[sample] = client;
        }
        cursor += take;
    }
    Ok(PartitionPlan {
        assignment,
        alpha: f64::INFINITY,
        num_clients,
        min_per_client,
    })
}

/// Stratified 80:20-style split. Classes with at least two samples are
/// represented in both sides; single-sample classes go to train.
pub fn split_train_test(
    ds: &TabularDataset,
    train_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(TabularDataset, TabularDataset)> {
    if ds.is_empty() {
        return Err(SentinelError::Data("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class_indices in &mut by_class {
        if class_indices.is_empty() {
            continue;
        }
        class_indices.shuffle(rng);
        let n = class_indices.len();
        if n == 1 {
            train_idx.push(class_indices[0]);
            continue;
        }
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train_idx.extend_from_slice(&class_indices[..n_train]);
        test_idx.extend_from_slice(&class_indices[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Gaussian blobs: class `c` sits at `separation · u_c` for orthogonal-ish
/// random unit directions `u_c`, with unit covariance.
pub fn synth_imbalanced(
    class_counts: &[usize],
    dim: usize,
    separation: f64,
    rng: &mut ChaCha12Rng,
) -> Result<TabularDataset> {
    if class_counts.is_empty() || class_counts.iter().any(|&n| n == 0) {
        return Err(SentinelError::InvalidArgument(
            "every class needs at least one sample".into(),
        ));
    }
    if dim == 0 {
        return Err(SentinelError::InvalidArgument("dim must be at least 1".into()));
    }
    let num_classes = class_counts.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while centers.len() < num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if centers.len() < dim {
            // Gram-Schmidt against already-chosen directions; with more
            // classes than dimensions the extras stay plain random units
            for c in &centers {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (vi, &ci) in v.iter_mut().zip(c) {
                    *vi -= dot * ci;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-9 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        centers.push(v);
    }
    let total: usize = class_counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &count) in class_counts.iter().enumerate() {
        for _ in 0..count {
            for k in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(separation * centers[c][k] + noise);
            }
            labels.push(c);
        }
    }
    Ok(TabularDataset {
        features: Tensor::new(vec![total, dim], data)?,
        labels,
        num_classes,
        feature_names: None,
        label_names: Some((0..num_classes).map(|c| c.to_string()).collect()),
    })
}
