//! TOML run configuration and sweep grids.
//!
//! A run file holds the [`DistillConfig`] fields at top level plus the
//! `[data]`, `[teacher]`, `[student]` and `[logging]` tables. Unknown keys
//! anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{load_csv_task, make_gaussian_task, split, Dataset, GaussianTask, SplitSpec, Standardizer};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::trainers::{DistillConfig, ExperimentSpec, ModelConfig};

const VAL_SEED_KEY: u64 = 0x0076_616c;

fn default_carve() -> Option<f64> {
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated Gaussians. Validation rows come from a separate draw with
    /// `val_label_noise`, unless `carve_fraction` is set.
    Gaussian {
        num_classes: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        label_noise: f64,
        n_train: usize,
        n_val: usize,
        #[serde(default)]
        val_label_noise: f64,
        #[serde(default = "default_carve")]
        carve_fraction: Option<f64>,
        /// Data seed; defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// CSV file. Validation comes from `val_path`, or is carved from the
    /// training file (`carve_fraction`, default 0.1).
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        val_path: Option<PathBuf>,
        #[serde(default = "default_carve")]
        carve_fraction: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_eval_every() -> u64 {
    10
}

fn default_flush_every() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_flush_every")]
    pub flush_every: u64,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        LoggingConfig {
            eval_every: default_eval_every(),
            flush_every: default_flush_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub distill: DistillConfig,
    pub data: DataConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub logging: LoggingConfig,
}

/// Pulls the offending field name out of a serde message such as
/// "missing field `alpha`".
fn field_of(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn section<T: for<'de> Deserialize<'de>>(table: &mut Table, key: &str, default: Option<T>) -> Result<T> {
    match table.remove(key) {
        Some(v) => v.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = field_of(&msg).map(|f| format!("{key}.{f}")).unwrap_or_else(|| key.to_string());
            Error::config(field, msg)
        }),
        None => default.ok_or_else(|| Error::config(key, format!("missing table [{key}]"))),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn from_table(mut table: Table) -> Result<Self> {
        let data = section::<DataConfig>(&mut table, "data", None)?;
        let teacher = section(&mut table, "teacher", Some(ModelConfig::default_teacher()))?;
        let student = section(&mut table, "student", Some(ModelConfig::default_student()))?;
        let logging = section(&mut table, "logging", Some(LoggingConfig::default()))?;
        let distill: DistillConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            Error::config(field_of(&msg).unwrap_or_else(|| "<config>".into()), msg)
        })?;
        let cfg = RunConfig {
            distill,
            data,
            teacher,
            student,
            logging,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative CSV paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataConfig::Csv { path, val_path, .. } = &mut self.data {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if let Some(v) = val_path {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        if self.logging.eval_every == 0 {
            return Err(Error::config("logging.eval_every", "must be positive"));
        }
        if self.logging.flush_every == 0 {
            return Err(Error::config("logging.flush_every", "must be positive"));
        }
        for (name, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            if m.hidden.contains(&0) {
                return Err(Error::config(format!("{name}.hidden"), "widths must be positive"));
            }
        }
        let carve = match &self.data {
            DataConfig::Gaussian {
                num_classes,
                dim,
                separation,
                label_noise,
                n_train,
                n_val,
                val_label_noise,
                carve_fraction,
                ..
            } => {
                if *num_classes < 2 {
                    return Err(Error::config("data.num_classes", "must be at least 2"));
                }
                if *dim == 0 {
                    return Err(Error::config("data.dim", "must be positive"));
                }
                if !(*separation > 0.0 && separation.is_finite()) {
                    return Err(Error::config("data.separation", "must be positive"));
                }
                for (f, v) in [("data.label_noise", label_noise), ("data.val_label_noise", val_label_noise)] {
                    if !(0.0..1.0).contains(v) {
                        return Err(Error::config(f, "must be in [0, 1)"));
                    }
                }
                if *n_train == 0 {
                    return Err(Error::config("data.n_train", "must be positive"));
                }
                if carve_fraction.is_none() && *n_val == 0 {
                    return Err(Error::config("data.n_val", "must be positive"));
                }
                carve_fraction
            }
            DataConfig::Csv { carve_fraction, .. } => carve_fraction,
        };
        if let Some(f) = carve {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::config("data.carve_fraction", "must be in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentSpec {
        ExperimentSpec {
            config: self.distill.clone(),
            teacher: self.teacher.clone(),
            student: self.student.clone(),
            eval_every: self.logging.eval_every,
        }
    }

    /// Train and validation sets; CSV features are standardized with
    /// statistics from the training rows.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataConfig::Gaussian {
                num_classes,
                dim,
                separation,
                label_noise,
                n_train,
                n_val,
                val_label_noise,
                carve_fraction,
                seed,
            } => {
                let seed = seed.unwrap_or(self.distill.seed);
                let task = GaussianTask {
                    num_classes: *num_classes,
                    dim: *dim,
                    separation: *separation,
                    label_noise: *label_noise,
                    n: *n_train,
                };
                let train = make_gaussian_task(&task, seed)?;
                match carve_fraction {
                    Some(fraction) => split(&train, &SplitSpec::CarveFromTrain { fraction: *fraction }, seed),
                    None => {
                        let val_task = GaussianTask {
                            label_noise: *val_label_noise,
                            n: *n_val,
                            ..task
                        };
                        let val = make_gaussian_task(&val_task, derive_seed(seed, VAL_SEED_KEY))?;
                        Ok((train, val))
                    }
                }
            }
            DataConfig::Csv {
                path,
                label_column,
                val_path,
                carve_fraction,
                seed,
            } => {
                let seed = seed.unwrap_or(self.distill.seed);
                let full = load_csv_task(path, label_column)?;
                let (mut train, mut val) = match val_path {
                    Some(vp) => (full, load_csv_task(vp, label_column)?),
                    None => split(
                        &full,
                        &SplitSpec::CarveFromTrain {
                            fraction: carve_fraction.unwrap_or(0.1),
                        },
                        seed,
                    )?,
                };
                let classes = train.num_classes.max(val.num_classes);
                train.num_classes = classes;
                val.num_classes = classes;
                let st = Standardizer::fit(&train)?;
                Ok((st.apply(&train), st.apply(&val)))
            }
        }
    }
}

/// Keys a sweep grid may list.
pub const SWEEP_KEYS: [&str; 5] = ["alpha", "update_order", "teacher_init", "trainer", "seed"];

/// One cell of a sweep: the overridden values and the resulting config.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub name: String,
    pub overrides: Vec<(String, Value)>,
    pub config: RunConfig,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses a sweep grid (a TOML table of key -> list) and expands the
/// Cartesian product over the base config. Keys are expanded in
/// [`SWEEP_KEYS`] order, the last key varying fastest.
pub fn expand_sweep(base: &Table, grid_text: &str) -> Result<Vec<SweepCell>> {
    let grid: Table = grid_text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<grid>", e.message().to_string()))?;
    if let Some(k) = grid.keys().find(|k| !SWEEP_KEYS.contains(&k.as_str())) {
        return Err(Error::config(k.clone(), "not a sweepable key"));
    }
    let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
    for key in SWEEP_KEYS {
        if let Some(v) = grid.get(key) {
            let list = match v {
                Value::Array(a) => a.clone(),
                _ => return Err(Error::config(key, "sweep values must be a list")),
            };
            if list.is_empty() {
                return Err(Error::config(key, "empty list of sweep values"));
            }
            axes.push((key.to_string(), list));
        }
    }
    if axes.is_empty() {
        return Err(Error::config("<grid>", "empty sweep grid"));
    }
    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(i, overrides)| {
            let mut table = base.clone();
            for (k, v) in &overrides {
                table.insert(k.clone(), v.clone());
            }
            let config = RunConfig::from_table(table)?;
            let label: Vec<String> = overrides.iter().map(|(k, v)| format!("{k}={}", value_label(v))).collect();
            Ok(SweepCell {
                name: format!("cell{i:03}_{}", label.join("_")),
                overrides,
                config,
            })
        })
        .collect()
}
