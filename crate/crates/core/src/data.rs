//! Datasets, splits and deterministic batching.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, stream_rng, Stream};

/// Labelled rows with stable identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    /// `Some` only for generated data with label noise; true marks a
    /// flipped label.
    pub noise_mask: Option<Vec<bool>>,
    pub num_classes: usize,
}

/// A mini-batch (training or validation).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Data(format!(
                "batch rows disagree: {} features, {} labels, {} ids",
                features.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Batch {
            features,
            labels,
            ids,
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

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, ids: Vec<u64>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Data(format!(
                "row counts disagree: {} features, {} labels, {} ids",
                features.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Data(format!("duplicate sample id {dup}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            ids,
            noise_mask: None,
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

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            noise_mask: self
                .noise_mask
                .as_ref()
                .map(|m| rows.iter().map(|&r| m[r]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// The whole dataset as one batch, in row order.
    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }

    pub fn is_noisy(&self, id: u64) -> Option<bool> {
        let mask = self.noise_mask.as_ref()?;
        self.ids.iter().position(|&i| i == id).map(|r| mask[r])
    }

    /// Content hash over features, labels, ids and the noise mask.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_le_bytes());
        h.update((self.features.nrows() as u64).to_le_bytes());
        h.update((self.features.ncols() as u64).to_le_bytes());
        for v in self.features.iter() {
            h.update(v.to_le_bytes());
        }
        for (l, id) in self.labels.iter().zip(&self.ids) {
            h.update((*l as u64).to_le_bytes());
            h.update(id.to_le_bytes());
        }
        if let Some(mask) = &self.noise_mask {
            h.update(mask.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of the synthetic class-conditional Gaussian task.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianTask {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub label_noise: f64,
    pub n: usize,
}

const MEANS_KEY: u64 = 0x6d65_616e;

/// Class-balanced isotropic Gaussians with unit variance.
///
/// When `num_classes <= dim` the class means sit on scaled coordinate axes
/// so every pair of means is exactly `separation` apart; otherwise means are
/// random directions of norm `separation / sqrt(2)`. The means depend only
/// on `(num_classes, dim)`, so draws with different seeds share them. Labels are flipped to a
/// uniformly chosen different class with probability `label_noise`.
pub fn make_gaussian_task(task: &GaussianTask, seed: u64) -> Result<Dataset> {
    let GaussianTask {
        num_classes: k,
        dim,
        separation,
        label_noise,
        n,
    } = *task;
    if k < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {k}")));
    }
    if dim == 0 {
        return Err(Error::Data("feature dimension must be positive".into()));
    }
    if n < k {
        return Err(Error::Data(format!("n = {n} is smaller than the number of classes {k}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Data(format!("separation must be positive, got {separation}")));
    }
    if !(0.0..1.0).contains(&label_noise) {
        return Err(Error::Data(format!("label noise must be in [0, 1), got {label_noise}")));
    }

    let mut means_rng = keyed_rng((k * 1_000_003 + dim) as u64, MEANS_KEY);
    let radius = separation / std::f64::consts::SQRT_2;
    let mut means = Array2::<f64>::zeros((k, dim));
    for c in 0..k {
        if k <= dim {
            means[[c, c]] = radius;
        } else {
            let v: Vec<f64> = (0..dim).map(|_| means_rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (j, x) in v.into_iter().enumerate() {
                means[[c, j]] = radius * x / norm;
            }
        }
    }

    let mut rng = stream_rng(seed, Stream::Data);
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let true_class = i % k;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[[i, j]] = means[[true_class, j]] + z;
        }
        let flip = label_noise > 0.0 && rng.random::<f64>() < label_noise;
        if flip {
            let offset = rng.random_range(1..k);
            labels.push((true_class + offset) % k);
        } else {
            labels.push(true_class);
        }
        mask.push(flip);
    }
    let mut ds = Dataset::new(features, labels, (0..n as u64).collect(), k)?;
    if label_noise > 0.0 {
        ds.noise_mask = Some(mask);
    }
    Ok(ds)
}

/// Reads a rectangular numeric CSV with a header row. Every column except
/// `label_column` becomes a feature; labels must be non-negative integers.
/// Features are returned raw; see [`Standardizer`].
pub fn load_csv_task(path: &Path, label_column: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv_task(&text, label_column)
}

pub fn parse_csv_task(text: &str, label_column: &str) -> Result<Dataset> {
    if text.trim().is_empty() {
        return Err(Error::Data("empty CSV file".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            col: 0,
            msg: e.to_string(),
        })?
        .clone();
    let mut names = HashSet::new();
    for (c, h) in headers.iter().enumerate() {
        if !names.insert(h) {
            return Err(Error::Parse {
                row: 1,
                col: c + 1,
                msg: format!("duplicate header `{h}`"),
            });
        }
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse {
            row: 1,
            col: 0,
            msg: format!("missing label column `{label_column}`"),
        })?;
    let width = headers.len();
    let dim = width - 1;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                col: record.len().min(width) + 1,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                let label = cell.parse::<usize>().map_err(|_| Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("label `{cell}` is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Parse {
                        row,
                        col: c + 1,
                        msg: format!("`{cell}` is not a finite number"),
                    }
                })?;
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("CSV has a header but no data rows".into()));
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    let features =
        Array2::from_shape_vec((n, dim), values).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(features, labels, (0..n as u64).collect(), num_classes)
}

/// Per-column mean and standard deviation fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot standardize on an empty training set".into()));
        }
        let n = train.len() as f64;
        let mean: Vec<f64> = train.features.columns().into_iter().map(|c| c.sum() / n).collect();
        let std = train
            .features
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for (j, mut col) in out.features.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

/// How the validation set is obtained.
#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// Use the given validation set as is.
    ProvidedVal(Dataset),
    /// Move a uniformly random `fraction` of training rows into validation.
    CarveFromTrain { fraction: f64 },
}

pub fn split(dataset: &Dataset, spec: &SplitSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        SplitSpec::ProvidedVal(val) => Ok((dataset.clone(), val.clone())),
        SplitSpec::CarveFromTrain { fraction } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::Data(format!("carve fraction must be in (0, 1), got {fraction}")));
            }
            let n = dataset.len();
            let n_val = ((fraction * n as f64).round() as usize).max(1);
            if n_val >= n {
                return Err(Error::Data(format!(
                    "carving {n_val} of {n} rows leaves no training rows"
                )));
            }
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut stream_rng(seed, Stream::Split));
            let mut val_rows = rows[..n_val].to_vec();
            let mut train_rows = rows[n_val..].to_vec();
            val_rows.sort_unstable();
            train_rows.sort_unstable();
            Ok((dataset.subset(&train_rows), dataset.subset(&val_rows)))
        }
    }
}

/// Batches for one epoch: rows reshuffled by `(seed, epoch)`, last short
/// batch kept.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Data("batch size must be positive".into()));
    }
    let mut rows: Vec<usize> = (0..dataset.len()).collect();
    rows.shuffle(&mut keyed_rng(seed, epoch));
    let full = dataset.as_batch();
    Ok(rows.chunks(batch_size).map(|chunk| full.select(chunk)).collect())
}

/// Endless batch source that reshuffles at every epoch boundary.
#[derive(Debug, Clone)]
pub struct BatchStream {
    seed: u64,
    batch_size: usize,
    epoch: u64,
    pending: std::collections::VecDeque<Batch>,
}

impl BatchStream {
    pub fn new(seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Data("batch size must be positive".into()));
        }
        Ok(BatchStream {
            seed,
            batch_size,
            epoch: 0,
            pending: Default::default(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        if dataset.is_empty() {
            return Err(Error::Data("cannot draw batches from an empty dataset".into()));
        }
        if self.pending.is_empty() {
            self.pending = batches(dataset, self.batch_size, self.seed, self.epoch)?.into();
            self.epoch += 1;
        }
        Ok(self.pending.pop_front().expect("non-empty epoch"))
    }
}
