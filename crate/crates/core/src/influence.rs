//! Distillation influence and the teacher gradients built from it.
//!
//! The influence of training sample `i` is the dot product between the
//! student's per-sample distillation gradient at `θ_s` and the gradient of
//! the validation loss at the lookahead parameters `θ_s' = θ_s − η_s ∇L_s`.
//! Two routes produce the influence-weighted teacher gradient:
//!
//! * the exact route loops over samples for per-sample gradients, then
//!   backpropagates the weighted distillation loss into the teacher;
//! * the finite-difference route perturbs the student along the validation
//!   gradient, `θ_s^± = θ_s ± ε g_val`, and backpropagates
//!   `(L(θ_s^+) − L(θ_s^−)) / 2ε` into the teacher, which costs two student
//!   forwards and one teacher backward.
//!
//! Influence values are in nats per unit step; the `η_s (1 − α)` prefactor
//! is left to the teacher learning rate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{axpy_params, per_sample_grads, sgd_step, GradVector, Graph, ParamVector, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{distill_from_logits, student_loss, val_loss, LossSettings, Reduction};
use crate::models::{Classifier, ClassifierSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonMode {
    Fixed,
    /// `ε = value / ‖g_val‖₂`.
    GradScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonRule {
    pub mode: EpsilonMode,
    pub value: f64,
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule {
            mode: EpsilonMode::GradScaled,
            value: 0.01,
        }
    }
}

impl EpsilonRule {
    pub fn validate(&self) -> Result<()> {
        if self.value > 0.0 && self.value.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("epsilon value must be positive, got {}", self.value)))
        }
    }

    pub fn epsilon(&self, val_grad_norm: f64) -> Result<f64> {
        self.validate()?;
        let eps = match self.mode {
            EpsilonMode::Fixed => self.value,
            EpsilonMode::GradScaled => self.value / val_grad_norm,
        };
        if eps > 0.0 && eps.is_finite() {
            Ok(eps)
        } else {
            Err(Error::DegenerateEpsilon(eps))
        }
    }
}

/// One logged influence value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub step: u64,
    pub sample_id: u64,
    pub influence: f64,
    /// Teacher probability of the (possibly noisy) training label.
    pub t_prob: f64,
    /// Student probability of the training label.
    pub s_prob: f64,
}

/// Teacher and student at the current step, with the loss settings.
#[derive(Debug, Clone, Copy)]
pub struct DistillPair<'a> {
    pub teacher: &'a Classifier,
    pub student: &'a Classifier,
    pub settings: LossSettings,
}

pub(crate) fn features(batch: &Batch) -> Tensor<'static> {
    Tensor::constant(batch.features.clone().into_dyn())
}

fn detached_logits(spec: &ClassifierSpec, params: &ParamVector, batch: &Batch) -> Result<Tensor<'static>> {
    spec.forward(&params.detached(), &features(batch))
}

/// `∇_{θ_s} L_s(θ_s, θ_t, z)` with the teacher frozen.
pub fn student_grad(pair: &DistillPair<'_>, batch: &Batch) -> Result<(f64, GradVector)> {
    let teacher_logits = pair.teacher.forward_logits(&batch.features)?;
    let graph = Graph::new();
    let bound = pair.student.params.attach(&graph);
    let x = features(batch);
    let logits = pair.student.logits(&bound, &x)?;
    let loss = student_loss(&logits, &teacher_logits, &batch.labels, &pair.settings, Reduction::Mean)?;
    let value = loss.item();
    Ok((value, graph.backward(&loss, &bound)?))
}

/// `θ_s' = θ_s − η_s ∇L_s(θ_s, θ_t, z)`; the student itself is not modified.
pub fn lookahead_student(pair: &DistillPair<'_>, batch: &Batch, eta_s: f64) -> Result<ParamVector> {
    let (_, grad) = student_grad(pair, batch)?;
    sgd_step(&pair.student.params, &grad, eta_s)
}

/// Gradient of the validation cross-entropy at `params`.
pub fn val_grad_at_lookahead(spec: &ClassifierSpec, params: &ParamVector, val_batch: &Batch) -> Result<GradVector> {
    if val_batch.is_empty() {
        return Err(Error::Data("empty validation batch".into()));
    }
    let graph = Graph::new();
    let bound = params.attach(&graph);
    let logits = spec.forward(&bound, &features(val_batch))?;
    let loss = val_loss(&logits, &val_batch.labels)?;
    graph.backward(&loss, &bound)
}

/// Mean validation loss of `spec` under `params`.
pub fn val_loss_at(spec: &ClassifierSpec, params: &ParamVector, val_batch: &Batch) -> Result<f64> {
    if val_batch.is_empty() {
        return Err(Error::Data("empty validation batch".into()));
    }
    Ok(val_loss(&detached_logits(spec, params, val_batch)?, &val_batch.labels)?.item())
}

/// Per-sample gradients of the distillation term with respect to the
/// student, one backward pass per sample.
pub fn distill_per_sample_grads(pair: &DistillPair<'_>, batch: &Batch) -> Result<Vec<GradVector>> {
    let student = pair.student;
    let teacher = pair.teacher;
    let settings = pair.settings;
    per_sample_grads(&student.params, batch, |bound, single| {
        let t_logits = teacher.forward_logits(&single.features)?;
        let s_logits = student.logits(bound, &features(single))?;
        distill_from_logits(&t_logits, &s_logits, &settings, Reduction::PerSample)
    })
}

/// Batch-mean distillation gradient with respect to the student.
pub fn distill_batch_grad(pair: &DistillPair<'_>, batch: &Batch) -> Result<GradVector> {
    let t_logits = pair.teacher.forward_logits(&batch.features)?;
    let graph = Graph::new();
    let bound = pair.student.params.attach(&graph);
    let s_logits = pair.student.logits(&bound, &features(batch))?;
    let loss = distill_from_logits(&t_logits, &s_logits, &pair.settings, Reduction::Mean)?;
    graph.backward(&loss, &bound)
}

/// Batch-mean distillation gradient with respect to the teacher, student frozen.
pub fn teacher_distill_grad(pair: &DistillPair<'_>, batch: &Batch) -> Result<GradVector> {
    weighted_teacher_distill_grad(pair, &pair.student.params, batch, None)
}

/// `∇_{θ_t} (1/B) Σ w_i L(T(x_i), S(x_i; student_params))` with constant weights.
fn weighted_teacher_distill_grad(
    pair: &DistillPair<'_>,
    student_params: &ParamVector,
    batch: &Batch,
    weights: Option<&[f64]>,
) -> Result<GradVector> {
    let s_logits = detached_logits(&pair.student.spec, student_params, batch)?;
    let graph = Graph::new();
    let bound = pair.teacher.params.attach(&graph);
    let t_logits = pair.teacher.logits(&bound, &features(batch))?;
    let per = distill_from_logits(&t_logits, &s_logits, &pair.settings, Reduction::PerSample)?;
    let weighted = match weights {
        Some(w) => per.mul(&Tensor::from_shape_vec(&[w.len()], w.to_vec())?),
        None => per,
    };
    graph.backward(&weighted.mean(), &bound)
}

/// Exact distillation influence of every sample, given the validation gradient.
pub fn distillation_influence_given(pair: &DistillPair<'_>, batch: &Batch, val_grad: &GradVector) -> Result<Vec<f64>> {
    distill_per_sample_grads(pair, batch)?
        .iter()
        .map(|g| g.dot(val_grad))
        .collect()
}

/// Exact distillation influence through per-sample gradients (the oracle path).
pub fn distillation_influence_exact(
    pair: &DistillPair<'_>,
    lookahead: &ParamVector,
    batch: &Batch,
    val_batch: &Batch,
) -> Result<Vec<f64>> {
    let g_val = val_grad_at_lookahead(&pair.student.spec, lookahead, val_batch)?;
    distillation_influence_given(pair, batch, &g_val)
}

/// Influence-weighted teacher gradient with weights from the exact route.
pub fn influence_weighted_teacher_grad_given(
    pair: &DistillPair<'_>,
    batch: &Batch,
    val_grad: &GradVector,
) -> Result<GradVector> {
    let w = distillation_influence_given(pair, batch, val_grad)?;
    weighted_teacher_distill_grad(pair, &pair.student.params, batch, Some(&w))
}

pub fn influence_weighted_teacher_grad_exact(
    pair: &DistillPair<'_>,
    lookahead: &ParamVector,
    batch: &Batch,
    val_batch: &Batch,
) -> Result<GradVector> {
    let g_val = val_grad_at_lookahead(&pair.student.spec, lookahead, val_batch)?;
    influence_weighted_teacher_grad_given(pair, batch, &g_val)
}

/// Result of the finite-difference route.
#[derive(Debug, Clone)]
pub struct FdaOutcome {
    /// Teacher gradient of the finite-difference influence loss.
    pub grad: GradVector,
    /// Per-sample finite-difference influence estimates, `(L_i^+ − L_i^−) / 2ε`.
    pub influences: Vec<f64>,
    pub epsilon: f64,
    /// Value of the finite-difference influence loss (mean of `influences`).
    pub loss: f64,
}

/// Finite-difference teacher gradient, given the validation gradient.
///
/// `clip`, when set, scales down any sample whose influence estimate exceeds
/// it in magnitude.
pub fn fda_given(
    pair: &DistillPair<'_>,
    batch: &Batch,
    val_grad: &GradVector,
    eps_rule: &EpsilonRule,
    clip: Option<f64>,
) -> Result<FdaOutcome> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    pair.student.params.check_congruent(val_grad)?;
    if val_grad.is_zero() {
        return Ok(FdaOutcome {
            grad: pair.teacher.params.zeros_grad(),
            influences: vec![0.0; batch.len()],
            epsilon: 0.0,
            loss: 0.0,
        });
    }
    let eps = eps_rule.epsilon(val_grad.norm())?;
    let plus = axpy_params(&pair.student.params, val_grad, eps)?;
    let minus = axpy_params(&pair.student.params, val_grad, -eps)?;
    if plus == minus {
        return Err(Error::DegenerateEpsilon(eps));
    }

    let x = features(batch);
    let s_plus = pair.student.logits(&plus.detached(), &x)?;
    let s_minus = pair.student.logits(&minus.detached(), &x)?;

    let graph = Graph::new();
    let bound = pair.teacher.params.attach(&graph);
    let t_logits = pair.teacher.logits(&bound, &x)?;
    let l_plus = distill_from_logits(&t_logits, &s_plus, &pair.settings, Reduction::PerSample)?;
    let l_minus = distill_from_logits(&t_logits, &s_minus, &pair.settings, Reduction::PerSample)?;
    let per = l_plus.sub(&l_minus).scale(1.0 / (2.0 * eps));
    let influences = per.to_vec();
    let per = match clip {
        Some(c) if c > 0.0 => {
            let scale: Vec<f64> = influences
                .iter()
                .map(|v| if v.abs() > c { c / v.abs() } else { 1.0 })
                .collect();
            per.mul(&Tensor::from_shape_vec(&[scale.len()], scale)?)
        }
        _ => per,
    };
    let loss = per.mean();
    let value = loss.item();
    let grad = graph.backward(&loss, &bound)?;
    Ok(FdaOutcome {
        grad,
        influences,
        epsilon: eps,
        loss: value,
    })
}

/// Finite-difference teacher gradient (the fast path).
pub fn influence_teacher_grad_fda(
    pair: &DistillPair<'_>,
    lookahead: &ParamVector,
    batch: &Batch,
    val_batch: &Batch,
    eps_rule: &EpsilonRule,
) -> Result<FdaOutcome> {
    let g_val = val_grad_at_lookahead(&pair.student.spec, lookahead, val_batch)?;
    fda_given(pair, batch, &g_val, eps_rule, None)
}

/// `L_val(before) − L_val(after)` on the probe batch.
pub fn tracin_influence(
    spec: &ClassifierSpec,
    before: &ParamVector,
    after: &ParamVector,
    probe: &Batch,
) -> Result<f64> {
    Ok(val_loss_at(spec, before, probe)? - val_loss_at(spec, after, probe)?)
}

/// Batch-level gradient similarity `h = ⟨∇_{θ_s} L(T, S), g_val⟩`.
pub fn meta_hypergradient_scalar(
    pair: &DistillPair<'_>,
    lookahead: &ParamVector,
    batch: &Batch,
    val_batch: &Batch,
) -> Result<f64> {
    let g_val = val_grad_at_lookahead(&pair.student.spec, lookahead, val_batch)?;
    distill_batch_grad(pair, batch)?.dot(&g_val)
}

/// Per-sample teacher and student probabilities of each training label.
pub fn label_probs(pair: &DistillPair<'_>, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = pair.teacher.predict_probs(&batch.features, 1.0)?;
    let s = pair.student.predict_probs(&batch.features, 1.0)?;
    let pick = |p: &ndarray::Array2<f64>| -> Vec<f64> {
        batch.labels.iter().enumerate().map(|(i, &y)| p[[i, y]]).collect()
    };
    Ok((pick(&t), pick(&s)))
}
