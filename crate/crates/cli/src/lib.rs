//! Commands behind the `lgtm` binary: single runs, sweeps and the
//! verification battery. Each command writes its artifacts to an output
//! directory and reports failures through [`lgtm_core::Error`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use lgtm_core::checks::{all_gating_passed, run_checks, CheckOptions, CheckResult};
use lgtm_core::config::{expand_sweep, DataConfig, RunConfig, SweepCell};
use lgtm_core::metrics::FileSink;
use lgtm_core::models::save_checkpoint;
use lgtm_core::trainers::{run_experiment, FinalMetrics};
use lgtm_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics: String,
    pub influence: String,
    pub teacher_checkpoint: String,
    pub student_checkpoint: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Artifacts {
            metrics: FileSink::METRICS_FILE.into(),
            influence: FileSink::INFLUENCE_FILE.into(),
            teacher_checkpoint: TEACHER_CKPT.into(),
            student_checkpoint: STUDENT_CKPT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub data: u64,
}

/// Everything needed to reproduce and locate one run. Written before
/// training starts and rewritten when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    /// The resolved config as TOML; `lgtm run --config manifest.json` reruns it.
    pub config: String,
    pub train_fingerprint: String,
    pub val_fingerprint: String,
    pub seeds: Seeds,
    /// File names relative to the run directory.
    pub artifacts: Artifacts,
    pub phases: Vec<Phase>,
    pub steps: Option<u64>,
    pub final_metrics: Option<FinalMetricsRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetricsRecord {
    pub student_train_acc: f64,
    pub student_val_acc: f64,
    pub student_val_loss: f64,
    pub teacher_val_acc: f64,
    pub teacher_val_loss: f64,
}

impl From<&FinalMetrics> for FinalMetricsRecord {
    fn from(m: &FinalMetrics) -> Self {
        FinalMetricsRecord {
            student_train_acc: m.student_train_acc,
            student_val_acc: m.student_val_acc,
            student_val_loss: m.student_val_loss,
            teacher_val_acc: m.teacher_val_acc,
            teacher_val_loss: m.teacher_val_loss,
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

/// Reads a run config from TOML, or from the config snapshot of a manifest
/// when the file is JSON.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = RunManifest::load(path)
            .map_err(|e| Error::config("<file>", format!("{} is not a run manifest: {e}", path.display())))?;
        RunConfig::from_toml_str(&manifest.config)
    } else {
        RunConfig::load(path)
    }
}

fn config_snapshot(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Data(format!("cannot serialize config: {e}")))
}

fn data_seed(cfg: &RunConfig) -> u64 {
    let explicit = match &cfg.data {
        DataConfig::Gaussian { seed, .. } | DataConfig::Csv { seed, .. } => *seed,
    };
    explicit.unwrap_or(cfg.distill.seed)
}

/// Trains one configuration and writes metrics, influence records,
/// checkpoints and the manifest into `out`.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let snapshot = config_snapshot(cfg)?;
    fs::create_dir_all(out)?;

    let t0 = Instant::now();
    let (train, val) = cfg.load_data()?;
    let mut manifest = RunManifest {
        status: RunStatus::Running,
        config: snapshot,
        train_fingerprint: train.fingerprint(),
        val_fingerprint: val.fingerprint(),
        seeds: Seeds {
            run: cfg.distill.seed,
            data: data_seed(cfg),
        },
        artifacts: Artifacts::default(),
        phases: vec![Phase {
            name: "load-data".into(),
            seconds: t0.elapsed().as_secs_f64(),
        }],
        steps: None,
        final_metrics: None,
        error: None,
    };
    manifest.write(out)?;

    let outcome = (|| -> Result<_> {
        let mut sink = FileSink::create(out, &manifest.train_fingerprint, cfg.logging.flush_every)?;
        let summary = run_experiment(&cfg.experiment(), &train, &val, &mut [&mut sink])?;
        let t1 = Instant::now();
        save_checkpoint(&out.join(TEACHER_CKPT), &summary.teacher, cfg.distill.seed, summary.steps)?;
        save_checkpoint(&out.join(STUDENT_CKPT), &summary.student, cfg.distill.seed, summary.steps)?;
        Ok((summary, t1.elapsed().as_secs_f64()))
    })();

    match outcome {
        Ok((summary, ckpt_seconds)) => {
            manifest.phases.extend(summary.phases.iter().map(|(name, seconds)| Phase {
                name: name.clone(),
                seconds: *seconds,
            }));
            manifest.phases.push(Phase {
                name: "checkpoint".into(),
                seconds: ckpt_seconds,
            });
            manifest.status = RunStatus::Complete;
            manifest.steps = Some(summary.steps);
            manifest.final_metrics = Some((&summary.final_metrics).into());
            manifest.write(out)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.write(out)?;
            Err(e)
        }
    }
}

/// Runs the verification battery and prints one line per check.
pub fn cmd_verify(opts: &CheckOptions, w: &mut impl Write) -> Result<(bool, Vec<CheckResult>)> {
    let results = run_checks(opts);
    for r in &results {
        writeln!(w, "{r}")?;
    }
    let ok = all_gating_passed(&results);
    writeln!(w, "{}", if ok { "verify: all gating checks passed" } else { "verify: FAILED" })?;
    Ok((ok, results))
}

/// Outcome of one sweep cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: SweepCell,
    pub dir: PathBuf,
    pub result: std::result::Result<RunManifest, String>,
}

const SUMMARY_FIELDS: [&str; 5] = [
    "student_val_acc",
    "student_val_loss",
    "student_train_acc",
    "teacher_val_acc",
    "teacher_val_loss",
];

fn metric_values(m: &FinalMetricsRecord) -> [f64; 5] {
    [
        m.student_val_acc,
        m.student_val_loss,
        m.student_train_acc,
        m.teacher_val_acc,
        m.teacher_val_loss,
    ]
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn setting_columns(cfg: &RunConfig) -> [String; 5] {
    let d = &cfg.distill;
    [
        label(&d.trainer),
        d.alpha.to_string(),
        label(&d.update_order),
        label(&d.teacher_init()),
        d.seed.to_string(),
    ]
}

/// Expands `grid_text` over the base config at `config_path` and runs every
/// cell, at most `jobs` at a time. Writes `summary.csv` (one row per cell)
/// and `aggregate.csv` (mean and std over seeds) into `out`.
pub fn cmd_sweep(config_path: &Path, grid_text: &str, jobs: usize, out: &Path) -> Result<Vec<CellOutcome>> {
    if jobs == 0 {
        return Err(Error::config("jobs", "must be positive"));
    }
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", config_path.display())))?;
    let base: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    let mut cells = expand_sweep(&base, grid_text)?;
    if let Some(dir) = config_path.parent() {
        for c in &mut cells {
            c.config.resolve_paths(dir);
        }
    }
    fs::create_dir_all(out)?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let dir = out.join(&cell.name);
                let result = cmd_run(&cell.config, &dir).map_err(|e| e.to_string());
                slots.lock().expect("sweep slots")[i] = Some(CellOutcome {
                    cell: cell.clone(),
                    dir,
                    result,
                });
            });
        }
    });
    let outcomes: Vec<CellOutcome> = slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .map(|o| o.expect("every cell ran"))
        .collect();
    write_summary(out, &outcomes)?;
    write_aggregate(out, &outcomes)?;
    Ok(outcomes)
}

fn write_summary(out: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(csv_err)?;
    let mut header = vec!["cell", "trainer", "alpha", "update_order", "teacher_init", "seed", "status", "steps"];
    header.extend(SUMMARY_FIELDS);
    w.write_record(&header).map_err(csv_err)?;
    for o in outcomes {
        let mut row: Vec<String> = vec![o.cell.name.clone()];
        row.extend(setting_columns(&o.cell.config));
        match &o.result {
            Ok(m) => {
                row.push("complete".into());
                row.push(m.steps.map(|s| s.to_string()).unwrap_or_default());
                let values = m.final_metrics.as_ref().map(metric_values);
                row.extend((0..SUMMARY_FIELDS.len()).map(|k| values.map(|v| v[k].to_string()).unwrap_or_default()));
            }
            Err(_) => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 1 + SUMMARY_FIELDS.len()));
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn write_aggregate(out: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let mut groups: Vec<([String; 4], Vec<[f64; 5]>)> = Vec::new();
    for o in outcomes {
        let cols = setting_columns(&o.cell.config);
        let key = [cols[0].clone(), cols[1].clone(), cols[2].clone(), cols[3].clone()];
        let pos = match groups.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                groups.push((key, Vec::new()));
                groups.len() - 1
            }
        };
        if let Ok(m) = &o.result {
            if let Some(fm) = &m.final_metrics {
                groups[pos].1.push(metric_values(fm));
            }
        }
    }
    let mut w = csv::Writer::from_path(out.join("aggregate.csv")).map_err(csv_err)?;
    let mut header: Vec<String> = ["trainer", "alpha", "update_order", "teacher_init", "runs"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for f in SUMMARY_FIELDS {
        header.push(format!("{f}_mean"));
        header.push(format!("{f}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for (key, runs) in &groups {
        let mut row: Vec<String> = key.to_vec();
        row.push(runs.len().to_string());
        for k in 0..SUMMARY_FIELDS.len() {
            if runs.is_empty() {
                row.extend([String::new(), String::new()]);
            } else {
                let (m, s) = mean_std(&runs.iter().map(|r| r[k]).collect::<Vec<_>>());
                row.extend([m.to_string(), s.to_string()]);
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
