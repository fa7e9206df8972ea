//! Supervised and distillation objectives.
//!
//! Cross-entropy takes the target distribution first: `ce_soft(p, q)` is
//! `−Σ p log q`. Teacher updates differentiate through `p`, student updates
//! through `q`. Which side carries gradient is decided by the caller through
//! attached or detached tensors; [`student_loss`] and [`teacher_loss_aux`]
//! detach the other model themselves.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::check_temperature;

/// Floor applied to probabilities inside `log`.
pub const PROB_FLOOR: f64 = 1e-12;

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillLoss {
    #[default]
    Ce,
    Mse,
}

/// Loss mixing weights shared by student and teacher objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub alpha: f64,
    pub temperature: f64,
    pub variant: DistillLoss,
}

impl LossSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Domain(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        check_temperature(self.temperature)
    }
}

fn reduce<'g>(per_sample: Tensor<'g>, reduction: Reduction) -> Tensor<'g> {
    match reduction {
        Reduction::Mean => per_sample.mean(),
        Reduction::PerSample => per_sample,
    }
}

fn check_rows(probs: &Tensor<'_>) -> Result<usize> {
    match probs.shape() {
        [_, c] => Ok(*c),
        s => Err(Error::Shape(format!("expected [B, C] probabilities, got {s:?}"))),
    }
}

fn check_stochastic(probs: &Tensor<'_>) -> Result<()> {
    let p = probs.values().view().into_dimensionality::<ndarray::Ix2>().unwrap();
    for (r, row) in p.rows().into_iter().enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Distribution { row: r, sum });
        }
    }
    Ok(())
}

/// `−log q[y]` per row, with `q` floored at [`PROB_FLOOR`].
pub fn ce_hard<'g>(labels: &[usize], probs: &Tensor<'g>, reduction: Reduction) -> Result<Tensor<'g>> {
    let classes = check_rows(probs)?;
    if labels.len() != probs.shape()[0] {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.shape()[0]
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    let per = probs.log_floor(PROB_FLOOR).gather_rows(labels).scale(-1.0);
    Ok(reduce(per, reduction))
}

/// `−Σ_c target_c log probs_c` per row.
pub fn ce_soft<'g>(target: &Tensor<'g>, probs: &Tensor<'g>, reduction: Reduction) -> Result<Tensor<'g>> {
    check_rows(target)?;
    check_rows(probs)?;
    if target.shape() != probs.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", target.shape(), probs.shape())));
    }
    check_stochastic(target)?;
    check_stochastic(probs)?;
    let per = target.mul(&probs.log_floor(PROB_FLOOR)).sum_rows().scale(-1.0);
    Ok(reduce(per, reduction))
}

/// Mean over classes of the squared probability difference, per row.
pub fn mse_soft<'g>(target: &Tensor<'g>, probs: &Tensor<'g>, reduction: Reduction) -> Result<Tensor<'g>> {
    check_rows(target)?;
    if target.shape() != probs.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", target.shape(), probs.shape())));
    }
    let diff = target.sub(probs);
    Ok(reduce(diff.mul(&diff).mean_rows(), reduction))
}

pub fn distill<'g>(
    variant: DistillLoss,
    target: &Tensor<'g>,
    probs: &Tensor<'g>,
    reduction: Reduction,
) -> Result<Tensor<'g>> {
    match variant {
        DistillLoss::Ce => ce_soft(target, probs, reduction),
        DistillLoss::Mse => mse_soft(target, probs, reduction),
    }
}

/// Distillation term between teacher and student logits at temperature.
/// Gradient flows through whichever logits are attached.
pub fn distill_from_logits<'g>(
    teacher_logits: &Tensor<'g>,
    student_logits: &Tensor<'g>,
    settings: &LossSettings,
    reduction: Reduction,
) -> Result<Tensor<'g>> {
    check_temperature(settings.temperature)?;
    let t = teacher_logits.softmax_rows(settings.temperature);
    let s = student_logits.softmax_rows(settings.temperature);
    distill(settings.variant, &t, &s, reduction)
}

fn mix<'g>(
    hard: Tensor<'g>,
    soft: Tensor<'g>,
    alpha: f64,
) -> Tensor<'g> {
    if alpha == 1.0 {
        hard
    } else if alpha == 0.0 {
        soft
    } else {
        hard.scale(alpha).add(&soft.scale(1.0 - alpha))
    }
}

/// `α·CE(y, S) + (1−α)·distill(T, S)`, teacher logits detached.
///
/// The supervised term uses temperature 1.
pub fn student_loss<'g>(
    student_logits: &Tensor<'g>,
    teacher_logits: &Tensor<'g>,
    labels: &[usize],
    settings: &LossSettings,
    reduction: Reduction,
) -> Result<Tensor<'g>> {
    settings.validate()?;
    let hard = ce_hard(labels, &student_logits.softmax_rows(1.0), Reduction::PerSample)?;
    let soft = distill_from_logits(&teacher_logits.detach(), student_logits, settings, Reduction::PerSample)?;
    Ok(reduce(mix(hard, soft, settings.alpha), reduction))
}

/// `α·CE(y, T) + (1−α)·distill(T, S)`, student logits detached.
pub fn teacher_loss_aux<'g>(
    teacher_logits: &Tensor<'g>,
    student_logits: &Tensor<'g>,
    labels: &[usize],
    settings: &LossSettings,
    reduction: Reduction,
) -> Result<Tensor<'g>> {
    settings.validate()?;
    let hard = ce_hard(labels, &teacher_logits.softmax_rows(1.0), Reduction::PerSample)?;
    let soft = distill_from_logits(teacher_logits, &student_logits.detach(), settings, Reduction::PerSample)?;
    Ok(reduce(mix(hard, soft, settings.alpha), reduction))
}

/// Mean cross-entropy of student predictions against validation labels.
pub fn val_loss<'g>(student_logits: &Tensor<'g>, labels: &[usize]) -> Result<Tensor<'g>> {
    ce_hard(labels, &student_logits.softmax_rows(1.0), Reduction::Mean)
}

/// Shannon entropy (nats) of each row.
pub fn entropy_rows(probs: &Array2<f64>) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}
