use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{finetune_teacher, DistillConfig, TeacherInit, TrainState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsRow, ModelRole, Sink, Split};
use crate::models::{Activation, Classifier, ClassifierSpec, Init};
use crate::rng::{derive_seed, stream_rng, Stream};

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_init() -> Init {
    Init::SeededHe
}

fn default_bias() -> bool {
    true
}

/// Architecture of one model; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_init")]
    pub init: Init,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

impl ModelConfig {
    pub fn new(hidden: &[usize]) -> Self {
        ModelConfig {
            hidden: hidden.to_vec(),
            activation: default_activation(),
            init: default_init(),
            bias: true,
        }
    }

    pub fn default_teacher() -> Self {
        Self::new(&[64, 64])
    }

    pub fn default_student() -> Self {
        Self::new(&[16])
    }

    pub fn spec(&self, input_dim: usize, num_classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            input_dim,
            hidden: self.hidden.clone(),
            num_classes,
            activation: self.activation,
            init: self.init,
            bias: self.bias,
        }
    }
}

/// Everything needed to run one experiment on already-loaded data.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub config: DistillConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    /// Evaluate every this many steps (and always at the first and last).
    pub eval_every: u64,
}

impl ExperimentSpec {
    pub fn new(config: DistillConfig) -> Self {
        ExperimentSpec {
            config,
            teacher: ModelConfig::default_teacher(),
            student: ModelConfig::default_student(),
            eval_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub student_val_loss: f64,
    pub student_val_acc: f64,
    pub teacher_val_loss: f64,
    pub teacher_val_acc: f64,
    pub entropy_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub student_train_acc: f64,
    pub student_val_acc: f64,
    pub student_val_loss: f64,
    pub teacher_val_acc: f64,
    pub teacher_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub steps: u64,
    pub final_metrics: FinalMetrics,
    pub curve: Vec<CurvePoint>,
    pub teacher: Classifier,
    pub student: Classifier,
    /// `(phase, seconds)` in execution order.
    pub phases: Vec<(String, f64)>,
}

impl Summary {
    /// Curve point with the lowest student validation loss (earliest on ties).
    pub fn min_val_loss_point(&self) -> &CurvePoint {
        self.curve
            .iter()
            .fold(&self.curve[0], |best, p| if p.student_val_loss < best.student_val_loss { p } else { best })
    }
}

/// Initial teacher and student for `spec` on data of the given shape.
pub fn build_models(spec: &ExperimentSpec, train: &Dataset) -> Result<(Classifier, Classifier)> {
    let cfg = &spec.config;
    let (d, c) = (train.dim(), train.num_classes);
    let student_spec = spec.student.spec(d, c);
    let student = Classifier::new(student_spec.clone(), "student", &mut stream_rng(cfg.seed, Stream::StudentInit))?;
    let fresh_teacher =
        || Classifier::new(spec.teacher.spec(d, c), "teacher", &mut stream_rng(cfg.seed, Stream::TeacherInit));
    let teacher = match cfg.teacher_init() {
        TeacherInit::Fresh => fresh_teacher()?,
        TeacherInit::SameAsStudent => Classifier::copy_of(&student, "teacher"),
        TeacherInit::Finetuned => finetune_teacher(
            &fresh_teacher()?,
            train,
            cfg.finetune_epochs,
            cfg.finetune_lr,
            cfg.batch_size,
            derive_seed(cfg.seed, Stream::Finetune as u64),
        )?,
    };
    Ok((teacher, student))
}

fn check_data(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    if train.dim() != val.dim() || train.num_classes != val.num_classes {
        return Err(Error::Data(format!(
            "train ({} features, {} classes) and val ({} features, {} classes) disagree",
            train.dim(),
            train.num_classes,
            val.dim(),
            val.num_classes
        )));
    }
    Ok(())
}

fn curve_point(rows: &[MetricsRow]) -> CurvePoint {
    let find = |model| {
        rows.iter()
            .find(|r| r.split == Split::Val && r.model == model)
            .expect("val rows present")
    };
    let (s, t) = (find(ModelRole::Student), find(ModelRole::Teacher));
    CurvePoint {
        step: s.step,
        student_val_loss: s.loss,
        student_val_acc: s.accuracy,
        teacher_val_loss: t.loss,
        teacher_val_acc: t.accuracy,
        entropy_gap: s.entropy_gap.unwrap_or(0.0),
    }
}

/// Builds the models, trains for `max_steps` and streams metrics rows and
/// influence records to every sink.
///
/// Metrics are evaluated at step 0 and then every `eval_every` steps and at
/// the final step; the step recorded is the number of completed updates.
pub fn run_experiment(
    spec: &ExperimentSpec,
    train: &Dataset,
    val: &Dataset,
    sinks: &mut [&mut dyn Sink],
) -> Result<Summary> {
    spec.config.validate()?;
    if spec.eval_every == 0 {
        return Err(Error::config("eval_every", "must be positive"));
    }
    check_data(train, val)?;
    let mut phases = Vec::new();

    let t0 = Instant::now();
    let (teacher, student) = build_models(spec, train)?;
    phases.push(("init".to_string(), t0.elapsed().as_secs_f64()));

    let t1 = Instant::now();
    let temperature = spec.config.temperature;
    let mut state = TrainState::new(spec.config.clone(), teacher, student)?;
    let mut curve = Vec::new();
    let emit = |state: &TrainState, sinks: &mut [&mut dyn Sink]| -> Result<Vec<MetricsRow>> {
        let rows = evaluate(state.step, &state.teacher, &state.student, train, val, temperature)?;
        for sink in sinks.iter_mut() {
            for row in &rows {
                sink.metrics(row)?;
            }
        }
        Ok(rows)
    };
    let rows = emit(&state, sinks)?;
    curve.push(curve_point(&rows));
    let mut last_rows = rows;

    for _ in 0..spec.config.max_steps {
        let report = state.advance(train, val)?;
        for sink in sinks.iter_mut() {
            for rec in &report.influences {
                sink.influence(rec)?;
            }
        }
        if state.step % spec.eval_every == 0 || state.step == spec.config.max_steps {
            let rows = emit(&state, sinks)?;
            curve.push(curve_point(&rows));
            last_rows = rows;
        }
        for sink in sinks.iter_mut() {
            sink.end_step(state.step)?;
        }
    }
    for sink in sinks.iter_mut() {
        sink.finish()?;
    }
    phases.push(("train".to_string(), t1.elapsed().as_secs_f64()));

    let pick = |split, model| {
        last_rows
            .iter()
            .find(|r| r.split == split && r.model == model)
            .expect("rows present")
    };
    let final_metrics = FinalMetrics {
        student_train_acc: pick(Split::Train, ModelRole::Student).accuracy,
        student_val_acc: pick(Split::Val, ModelRole::Student).accuracy,
        student_val_loss: pick(Split::Val, ModelRole::Student).loss,
        teacher_val_acc: pick(Split::Val, ModelRole::Teacher).accuracy,
        teacher_val_loss: pick(Split::Val, ModelRole::Teacher).loss,
    };
    Ok(Summary {
        steps: state.step,
        final_metrics,
        curve,
        teacher: state.teacher,
        student: state.student,
        phases,
    })
}
