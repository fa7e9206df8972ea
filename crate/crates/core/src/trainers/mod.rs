//! Vanilla, online, meta and LGTM training loops.
//!
//! All updates are plain SGD. Each step function mutates a [`TrainState`]
//! and returns a [`StepReport`] recording which parameter versions every
//! update saw, so ordering contracts can be asserted without timing.

mod config;
mod run;

pub use config::{DistillConfig, InfluenceDirection, TeacherInit, TrainerKind, UpdateOrder};
pub use run::{
    build_models, run_experiment, CurvePoint, ExperimentSpec, FinalMetrics, ModelConfig, Summary,
};

use crate::autodiff::{sgd_step, GradVector, Graph};
use crate::data::{Batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::influence::{
    distill_batch_grad, fda_given, features, label_probs, lookahead_student, student_grad,
    teacher_distill_grad, val_grad_at_lookahead, DistillPair, InfluenceRecord,
};
use crate::losses::{ce_hard, teacher_loss_aux, Reduction};
use crate::models::Classifier;
use crate::rng::{derive_seed, Stream};

/// Everything one trainer owns.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub teacher: Classifier,
    pub student: Classifier,
    pub config: DistillConfig,
    pub train_batches: BatchStream,
    pub val_batches: BatchStream,
}

/// What one step did.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub step: u64,
    pub student_loss: f64,
    pub teacher_loss: Option<f64>,
    pub teacher_version_before: u64,
    pub teacher_version_after: u64,
    /// Teacher parameter version used for the committed student update.
    pub student_saw_teacher_version: u64,
    /// Student parameter version the teacher gradient was computed against.
    pub teacher_saw_student_version: Option<u64>,
    /// Meta-distillation scalar `h`.
    pub hypergradient: Option<f64>,
    pub influences: Vec<InfluenceRecord>,
}

impl TrainState {
    pub fn new(config: DistillConfig, teacher: Classifier, student: Classifier) -> Result<Self> {
        config.validate()?;
        let train_batches = BatchStream::new(derive_seed(config.seed, Stream::TrainBatches as u64), config.batch_size)?;
        let val_batches =
            BatchStream::new(derive_seed(config.seed, Stream::ValBatches as u64), config.val_batch_size())?;
        Ok(TrainState {
            step: 0,
            teacher,
            student,
            config,
            train_batches,
            val_batches,
        })
    }

    fn pair(&self) -> DistillPair<'_> {
        DistillPair {
            teacher: &self.teacher,
            student: &self.student,
            settings: self.config.settings(),
        }
    }

    /// Runs one step of the configured trainer, drawing batches from the
    /// state's streams.
    pub fn advance(&mut self, train: &Dataset, val: &Dataset) -> Result<StepReport> {
        let batch = self.train_batches.next_batch(train)?;
        match self.config.trainer {
            TrainerKind::Vanilla => vanilla_step(self, &batch),
            TrainerKind::Online => online_step(self, &batch),
            TrainerKind::Meta => {
                let vb = self.val_batches.next_batch(val)?;
                meta_step(self, &batch, &vb)
            }
            TrainerKind::Lgtm => {
                let vb = self.val_batches.next_batch(val)?;
                lgtm_step(self, &batch, &vb)
            }
        }
    }
}

fn check_finite(what: &str, g: &GradVector) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} gradient is not finite")))
    }
}

/// Supervised cross-entropy gradient of a single model.
pub fn supervised_grad(model: &Classifier, batch: &Batch) -> Result<(f64, GradVector)> {
    let graph = Graph::new();
    let bound = model.params.attach(&graph);
    let logits = model.logits(&bound, &features(batch))?;
    let loss = ce_hard(&batch.labels, &logits.softmax_rows(1.0), Reduction::Mean)?;
    let value = loss.item();
    Ok((value, graph.backward(&loss, &bound)?))
}

/// Plain cross-entropy SGD over `epochs` passes of `train`.
pub fn finetune_teacher(
    teacher: &Classifier,
    train: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::Data("cannot fine-tune on an empty dataset".into()));
    }
    let mut model = teacher.clone();
    for epoch in 0..epochs {
        for batch in crate::data::batches(train, batch_size, seed, epoch as u64)? {
            let (_, g) = supervised_grad(&model, &batch)?;
            check_finite("teacher", &g)?;
            model.params = sgd_step(&model.params, &g, lr)?;
        }
    }
    Ok(model)
}

/// Gradient of the teacher objective `α CE(y, T) + (1−α) distill(T, S)`
/// with the student frozen.
pub fn teacher_aux_grad(pair: &DistillPair<'_>, batch: &Batch) -> Result<(f64, GradVector)> {
    let x = features(batch);
    let s_logits = pair.student.forward_logits(&batch.features)?;
    let graph = Graph::new();
    let bound = pair.teacher.params.attach(&graph);
    let t_logits = pair.teacher.logits(&bound, &x)?;
    let loss = teacher_loss_aux(&t_logits, &s_logits, &batch.labels, &pair.settings, Reduction::Mean)?;
    let value = loss.item();
    Ok((value, graph.backward(&loss, &bound)?))
}

fn update_student(state: &mut TrainState, batch: &Batch, report: &mut StepReport) -> Result<()> {
    let (loss, g) = student_grad(&state.pair(), batch)?;
    check_finite("student", &g)?;
    report.student_loss = loss;
    report.student_saw_teacher_version = state.teacher.params.version();
    state.student.params = sgd_step(&state.student.params, &g, state.config.eta_s)?;
    Ok(())
}

fn begin(state: &TrainState) -> StepReport {
    StepReport {
        step: state.step,
        teacher_version_before: state.teacher.params.version(),
        ..Default::default()
    }
}

fn finish(state: &mut TrainState, mut report: StepReport) -> StepReport {
    report.teacher_version_after = state.teacher.params.version();
    state.step += 1;
    report
}

/// Student SGD on `L_s` against a frozen teacher.
pub fn vanilla_step(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    let mut report = begin(state);
    update_student(state, batch, &mut report)?;
    Ok(finish(state, report))
}

/// Teacher on `L_t` and student on `L_s`, in the configured order.
pub fn online_step(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    let mut report = begin(state);
    let eta_t = state.config.eta_t;
    match state.config.update_order {
        UpdateOrder::TeacherFirst => {
            let (lt, gt) = teacher_aux_grad(&state.pair(), batch)?;
            check_finite("teacher", &gt)?;
            report.teacher_loss = Some(lt);
            report.teacher_saw_student_version = Some(state.student.params.version());
            state.teacher.params = sgd_step(&state.teacher.params, &gt, eta_t)?;
            update_student(state, batch, &mut report)?;
        }
        UpdateOrder::StudentFirst => {
            update_student(state, batch, &mut report)?;
            let (lt, gt) = teacher_aux_grad(&state.pair(), batch)?;
            check_finite("teacher", &gt)?;
            report.teacher_loss = Some(lt);
            report.teacher_saw_student_version = Some(state.student.params.version());
            state.teacher.params = sgd_step(&state.teacher.params, &gt, eta_t)?;
        }
        UpdateOrder::Simultaneous => {
            let (lt, gt) = teacher_aux_grad(&state.pair(), batch)?;
            check_finite("teacher", &gt)?;
            report.teacher_loss = Some(lt);
            report.teacher_saw_student_version = Some(state.student.params.version());
            update_student(state, batch, &mut report)?;
            state.teacher.params = sgd_step(&state.teacher.params, &gt, eta_t)?;
        }
    }
    Ok(finish(state, report))
}

/// Student SGD on `L_s`, then the teacher follows the first-order
/// hypergradient `−η_s (1−α) h ∇_{θ_t} L(T, S(θ_s^m))`.
pub fn meta_step(state: &mut TrainState, batch: &Batch, val_batch: &Batch) -> Result<StepReport> {
    let mut report = begin(state);
    let settings = state.config.settings();
    let before = state.student.clone();
    update_student(state, batch, &mut report)?;

    let pair = DistillPair {
        teacher: &state.teacher,
        student: &before,
        settings,
    };
    let g_val = val_grad_at_lookahead(&state.student.spec, &state.student.params, val_batch)?;
    let h = distill_batch_grad(&pair, batch)?.dot(&g_val)?;
    let g_distill = teacher_distill_grad(&pair, batch)?;
    let coeff = -state.config.eta_s * (1.0 - settings.alpha) * h;
    let gt = g_distill.scaled(coeff);
    check_finite("teacher", &gt)?;
    report.hypergradient = Some(h);
    report.teacher_saw_student_version = Some(before.params.version());
    state.teacher.params = sgd_step(&state.teacher.params, &gt, state.config.eta_t)?;
    Ok(finish(state, report))
}

/// Teacher gradient of LGTM: finite-difference influence loss plus the
/// auxiliary loss, evaluated against the state's current student. The sign
/// of the influence term follows [`InfluenceDirection`].
pub fn lgtm_teacher_grad(
    state: &TrainState,
    batch: &Batch,
    val_batch: &Batch,
    report: &mut StepReport,
) -> Result<GradVector> {
    let pair = state.pair();
    let lookahead = lookahead_student(&pair, batch, state.config.eta_s)?;
    let g_val = val_grad_at_lookahead(&state.student.spec, &lookahead, val_batch)?;
    let fda = fda_given(&pair, batch, &g_val, &state.config.epsilon, state.config.influence_clip)?;
    let (aux, g_aux) = teacher_aux_grad(&pair, batch)?;
    let (t_prob, s_prob) = label_probs(&pair, batch)?;
    report.teacher_saw_student_version = Some(state.student.params.version());
    report.influences = batch
        .ids
        .iter()
        .zip(&fda.influences)
        .zip(t_prob.iter().zip(&s_prob))
        .map(|((&id, &inf), (&tp, &sp))| InfluenceRecord {
            step: state.step,
            sample_id: id,
            influence: inf,
            t_prob: tp,
            s_prob: sp,
        })
        .collect();
    let sign = match state.config.influence_direction {
        InfluenceDirection::Generalization => -1.0,
        InfluenceDirection::Literal => 1.0,
    };
    report.teacher_loss = Some(sign * fda.loss + aux);
    let g = g_aux.add_scaled(&fda.grad, sign)?;
    check_finite("teacher", &g)?;
    Ok(g)
}

/// One iteration of LGTM: lookahead student, validation gradient,
/// perturbed students, finite-difference influence loss, teacher update on
/// influence plus auxiliary loss, then the original student update.
pub fn lgtm_step(state: &mut TrainState, batch: &Batch, val_batch: &Batch) -> Result<StepReport> {
    if val_batch.is_empty() {
        return Err(Error::Data("empty validation batch".into()));
    }
    let mut report = begin(state);
    let eta_t = state.config.eta_t;
    match state.config.update_order {
        UpdateOrder::TeacherFirst => {
            let gt = lgtm_teacher_grad(state, batch, val_batch, &mut report)?;
            state.teacher.params = sgd_step(&state.teacher.params, &gt, eta_t)?;
            update_student(state, batch, &mut report)?;
        }
        UpdateOrder::StudentFirst => {
            update_student(state, batch, &mut report)?;
            let gt = lgtm_teacher_grad(state, batch, val_batch, &mut report)?;
            state.teacher.params = sgd_step(&state.teacher.params, &gt, eta_t)?;
        }
        UpdateOrder::Simultaneous => {
            let gt = lgtm_teacher_grad(state, batch, val_batch, &mut report)?;
            update_student(state, batch, &mut report)?;
            state.teacher.params = sgd_step(&state.teacher.params, &gt, eta_t)?;
        }
    }
    Ok(finish(state, report))
}
