//! Evaluation, telemetry sinks and influence cohort statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::influence::InfluenceRecord;
use crate::losses::{entropy_rows, PROB_FLOOR};
use crate::models::Classifier;

pub const METRICS_HEADER: &str = "step,split,model,loss,accuracy,entropy_gap";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Teacher,
    Student,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Student => "student",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub split: Split,
    pub model: ModelRole,
    pub loss: f64,
    pub accuracy: f64,
    pub entropy_gap: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let gap = self.entropy_gap.map(|g| g.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step, self.split, self.model, self.loss, self.accuracy, gap
        )
    }
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(model: &Classifier, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let pred = model.predict(&dataset.features)?;
    let hits = pred.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Mean cross-entropy of `model` against the dataset labels.
pub fn mean_ce(model: &Classifier, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("loss of an empty dataset".into()));
    }
    let probs = model.predict_probs(&dataset.features, 1.0)?;
    let total: f64 = dataset
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / dataset.len() as f64)
}

/// Mean student entropy minus mean teacher entropy (nats). With
/// `absolute`, the mean of per-row absolute differences.
pub fn entropy_gap(
    teacher: &Classifier,
    student: &Classifier,
    dataset: &Dataset,
    temperature: f64,
    absolute: bool,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("entropy gap of an empty dataset".into()));
    }
    let ht = entropy_rows(&teacher.predict_probs(&dataset.features, temperature)?);
    let hs = entropy_rows(&student.predict_probs(&dataset.features, temperature)?);
    let n = ht.len() as f64;
    Ok(ht
        .iter()
        .zip(&hs)
        .map(|(t, s)| if absolute { (s - t).abs() } else { s - t })
        .sum::<f64>()
        / n)
}

/// Metrics rows for both models on both splits.
pub fn evaluate(
    step: u64,
    teacher: &Classifier,
    student: &Classifier,
    train: &Dataset,
    val: &Dataset,
    temperature: f64,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(4);
    for (split, ds) in [(Split::Train, train), (Split::Val, val)] {
        if ds.is_empty() {
            continue;
        }
        rows.push(MetricsRow {
            step,
            split,
            model: ModelRole::Teacher,
            loss: mean_ce(teacher, ds)?,
            accuracy: accuracy(teacher, ds)?,
            entropy_gap: None,
        });
        rows.push(MetricsRow {
            step,
            split,
            model: ModelRole::Student,
            loss: mean_ce(student, ds)?,
            accuracy: accuracy(student, ds)?,
            entropy_gap: Some(entropy_gap(teacher, student, ds, temperature, false)?),
        });
    }
    Ok(rows)
}

/// Append-only destination for metrics rows and influence records.
pub trait Sink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()>;
    fn influence(&mut self, record: &InfluenceRecord) -> Result<()>;
    /// Called after every training step.
    fn end_step(&mut self, _step: u64) -> Result<()> {
        Ok(())
    }
    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Collects everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<InfluenceRecord>,
}

impl Sink for MemorySink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }

    fn influence(&mut self, record: &InfluenceRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Writes `metrics.csv` and `influence.jsonl`, flushing every `flush_every` steps.
pub struct FileSink {
    metrics: BufWriter<File>,
    influence: BufWriter<File>,
    flush_every: u64,
}

impl FileSink {
    pub const METRICS_FILE: &'static str = "metrics.csv";
    pub const INFLUENCE_FILE: &'static str = "influence.jsonl";

    /// The dataset fingerprint is written as a leading `#` comment line.
    pub fn create(dir: &Path, dataset_fingerprint: &str, flush_every: u64) -> Result<Self> {
        let mut metrics = BufWriter::new(File::create(dir.join(Self::METRICS_FILE))?);
        writeln!(metrics, "# dataset_fingerprint={dataset_fingerprint}")?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        let influence = BufWriter::new(File::create(dir.join(Self::INFLUENCE_FILE))?);
        Ok(FileSink {
            metrics,
            influence,
            flush_every: flush_every.max(1),
        })
    }
}

impl Sink for FileSink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv_line())?;
        Ok(())
    }

    fn influence(&mut self, record: &InfluenceRecord) -> Result<()> {
        serde_json::to_writer(&mut self.influence, record)?;
        self.influence.write_all(b"\n")?;
        Ok(())
    }

    fn end_step(&mut self, step: u64) -> Result<()> {
        if step.is_multiple_of(self.flush_every) {
            self.metrics.flush()?;
            self.influence.flush()?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.influence.flush()?;
        Ok(())
    }
}

/// Summary statistics of a set of influence values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Band {
    pub count: usize,
    pub mean: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Band {
    pub fn of(values: &[f64]) -> Option<Band> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Band {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            q10: quantile(&sorted, 0.1),
            q50: quantile(&sorted, 0.5),
            q90: quantile(&sorted, 0.9),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCohort {
    pub step: u64,
    pub all: Band,
    pub clean: Option<Band>,
    pub noisy: Option<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortStats {
    pub steps: Vec<StepCohort>,
}

/// Per-step influence bands, split into clean and noisy cohorts when the
/// dataset carries a noise mask.
pub fn influence_cohort_stats(records: &[InfluenceRecord], dataset: &Dataset) -> Result<CohortStats> {
    if records.is_empty() {
        return Err(Error::Data("no influence records".into()));
    }
    let noisy: Option<HashMap<u64, bool>> = dataset
        .noise_mask
        .as_ref()
        .map(|m| dataset.ids.iter().copied().zip(m.iter().copied()).collect());
    let mut by_step: BTreeMap<u64, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let entry = by_step.entry(r.step).or_default();
        entry.0.push(r.influence);
        if let Some(map) = &noisy {
            match map.get(&r.sample_id) {
                Some(true) => entry.2.push(r.influence),
                Some(false) => entry.1.push(r.influence),
                None => {}
            }
        }
    }
    let steps = by_step
        .into_iter()
        .map(|(step, (all, clean, noisy))| StepCohort {
            step,
            all: Band::of(&all).expect("non-empty step"),
            clean: Band::of(&clean),
            noisy: Band::of(&noisy),
        })
        .collect();
    Ok(CohortStats { steps })
}

impl CohortStats {
    /// Pooled `(clean, noisy)` mean influence over steps in `[from, to)`.
    pub fn window_means(&self, from: u64, to: u64) -> (Option<f64>, Option<f64>) {
        let pooled = |pick: fn(&StepCohort) -> Option<&Band>| {
            let (sum, n) = self
                .steps
                .iter()
                .filter(|s| s.step >= from && s.step < to)
                .filter_map(pick)
                .fold((0.0, 0usize), |(s, n), b| (s + b.mean * b.count as f64, n + b.count));
            (n > 0).then(|| sum / n as f64)
        };
        (pooled(|s| s.clean.as_ref()), pooled(|s| s.noisy.as_ref()))
    }
}
