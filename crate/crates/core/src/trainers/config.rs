use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::EpsilonRule;
use crate::losses::{DistillLoss, LossSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    Vanilla,
    Online,
    Meta,
    Lgtm,
}

impl TrainerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainerKind::Vanilla => "vanilla",
            TrainerKind::Online => "online",
            TrainerKind::Meta => "meta",
            TrainerKind::Lgtm => "lgtm",
        }
    }

    /// Teacher initialisation used when the config leaves it unset:
    /// two-stage trainers start from a fine-tuned teacher, one-stage
    /// trainers from a fresh one.
    pub fn default_teacher_init(&self) -> TeacherInit {
        match self {
            TrainerKind::Vanilla | TrainerKind::Meta => TeacherInit::Finetuned,
            TrainerKind::Online | TrainerKind::Lgtm => TeacherInit::Fresh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    #[default]
    TeacherFirst,
    StudentFirst,
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherInit {
    /// Fresh teacher trained on the supervised loss before distillation.
    Finetuned,
    /// Teacher takes the student's architecture and initial parameters.
    SameAsStudent,
    /// Freshly initialised teacher.
    Fresh,
}

/// Sign of the finite-difference influence term in the LGTM teacher loss.
///
/// The finite-difference loss `L̂ = mean_i (L_i(θ_s^+) − L_i(θ_s^−)) / 2ε`
/// approximates the mean distillation influence. `Generalization` descends on
/// `L_aux − L̂`, which moves the teacher along `−∇_{θ_t} L_val(θ_s^{m+1})`;
/// `Literal` descends on `L̂ + L_aux` as the objective is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceDirection {
    #[default]
    Generalization,
    Literal,
}

fn default_finetune_epochs() -> usize {
    6
}

fn default_finetune_lr() -> f64 {
    0.1
}

/// Hyperparameters of one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub trainer: TrainerKind,
    pub alpha: f64,
    pub temperature: f64,
    pub eta_s: f64,
    pub eta_t: f64,
    #[serde(default)]
    pub epsilon: EpsilonRule,
    #[serde(default)]
    pub loss: DistillLoss,
    pub max_steps: u64,
    pub batch_size: usize,
    /// Validation batch size; defaults to `batch_size`.
    #[serde(default)]
    pub val_batch_size: Option<usize>,
    #[serde(default)]
    pub update_order: UpdateOrder,
    /// Defaults per trainer, see [`TrainerKind::default_teacher_init`].
    #[serde(default)]
    pub teacher_init: Option<TeacherInit>,
    pub seed: u64,
    /// Bound on the magnitude of per-sample influence weights; off by default.
    #[serde(default)]
    pub influence_clip: Option<f64>,
    #[serde(default)]
    pub influence_direction: InfluenceDirection,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
}

impl DistillConfig {
    /// Default hyperparameters for the given trainer.
    pub fn new(trainer: TrainerKind) -> Self {
        DistillConfig {
            trainer,
            alpha: 0.6,
            temperature: 1.0,
            eta_s: 0.1,
            eta_t: 0.1,
            epsilon: EpsilonRule::default(),
            loss: DistillLoss::Ce,
            max_steps: 1000,
            batch_size: 32,
            val_batch_size: None,
            update_order: UpdateOrder::TeacherFirst,
            teacher_init: None,
            seed: 0,
            influence_clip: None,
            influence_direction: InfluenceDirection::Generalization,
            finetune_epochs: default_finetune_epochs(),
            finetune_lr: default_finetune_lr(),
        }
    }

    pub fn settings(&self) -> LossSettings {
        LossSettings {
            alpha: self.alpha,
            temperature: self.temperature,
            variant: self.loss,
        }
    }

    pub fn teacher_init(&self) -> TeacherInit {
        self.teacher_init
            .unwrap_or_else(|| self.trainer.default_teacher_init())
    }

    pub fn val_batch_size(&self) -> usize {
        self.val_batch_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a positive number, got {v}")))
            }
        };
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must be in [0, 1], got {}", self.alpha)));
        }
        positive("temperature", self.temperature)?;
        positive("eta_s", self.eta_s)?;
        // eta_t = 0 freezes the teacher; LGTM with a frozen fine-tuned
        // teacher must reproduce vanilla distillation.
        if !(self.eta_t >= 0.0 && self.eta_t.is_finite()) {
            return Err(Error::config("eta_t", format!("must be >= 0, got {}", self.eta_t)));
        }
        positive("epsilon.value", self.epsilon.value)?;
        positive("finetune_lr", self.finetune_lr)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.val_batch_size == Some(0) {
            return Err(Error::config("val_batch_size", "must be positive"));
        }
        if let Some(c) = self.influence_clip {
            positive("influence_clip", c)?;
        }
        Ok(())
    }
}
