//! Numerical self-checks run by `lgtm verify`.
//!
//! Every check builds its own small random problems from fixed seeds, so a
//! report is reproducible. Gating checks decide the exit status; the others
//! are printed for information.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::{counters, per_sample_grads, sgd_step, GradVector, ParamVector};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::influence::{
    distill_batch_grad, distill_per_sample_grads, distillation_influence_given, fda_given,
    influence_weighted_teacher_grad_given, lookahead_student, meta_hypergradient_scalar, student_grad,
    val_grad_at_lookahead, val_loss_at, DistillPair, EpsilonRule,
};
use crate::losses::{DistillLoss, LossSettings};
use crate::models::{Activation, Classifier, ClassifierSpec};
use crate::rng::keyed_rng;
use crate::trainers::teacher_aux_grad;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Small,
    Full,
}

impl Scale {
    fn pick(self, small: usize, full: usize) -> usize {
        match self {
            Scale::Small => small,
            Scale::Full => full,
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Scale::Small),
            "full" => Ok(Scale::Full),
            other => Err(Error::config("scale", format!("expected small or full, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub scale: Scale,
    /// Replaces the finite-difference ε rule in the FDA checks.
    pub epsilon: Option<EpsilonRule>,
}

impl CheckOptions {
    pub fn new(scale: Scale) -> Self {
        CheckOptions { scale, epsilon: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub gating: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.passed, self.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        write!(f, "{status} {:<26} {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

/// True when every gating check passed.
pub fn all_gating_passed(results: &[CheckResult]) -> bool {
    results.iter().filter(|r| r.gating).all(|r| r.passed)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn random_batch(seed: u64, n: usize, dim: usize, classes: usize) -> Batch {
    let mut rng = keyed_rng(seed, 0xba7c);
    let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Array2::from_shape_vec((n, dim), x).expect("shape"), labels, (0..n as u64).collect())
        .expect("batch")
}

/// Adds noise to every parameter so no activation sits exactly on a kink
/// (zero-initialized biases would put dead units there).
fn jittered(model: Classifier, rng: &mut impl Rng) -> Result<Classifier> {
    let flat: Vec<f64> = model.params.flatten().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    let params = model.params.unflatten(&flat)?;
    Classifier::from_params(model.spec, params)
}

/// A random teacher/student problem; shapes and layer types vary with the seed.
struct Problem {
    teacher: Classifier,
    student: Classifier,
    settings: LossSettings,
    batch: Batch,
    val: Batch,
}

impl Problem {
    fn new(seed: u64, smooth: bool, batch_size: usize) -> Result<Self> {
        let mut rng = keyed_rng(seed, 0x9e0b);
        let dim = rng.random_range(2..5);
        let classes = rng.random_range(2..4);
        let activation = if smooth || rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
        let mut ts = ClassifierSpec::mlp(dim, &[rng.random_range(4..9), rng.random_range(3..7)], classes);
        let mut ss = ClassifierSpec::mlp(dim, &[rng.random_range(2..6)], classes);
        ts.activation = activation;
        ss.activation = activation;
        ss.bias = rng.random_bool(0.8);
        let settings = LossSettings {
            alpha: rng.random_range(0.0..0.9),
            temperature: rng.random_range(0.5..3.0),
            variant: if rng.random_bool(0.7) { DistillLoss::Ce } else { DistillLoss::Mse },
        };
        Ok(Problem {
            teacher: jittered(Classifier::new(ts, "teacher", &mut keyed_rng(seed, 1))?, &mut rng)?,
            student: jittered(Classifier::new(ss, "student", &mut keyed_rng(seed, 2))?, &mut rng)?,
            settings,
            batch: random_batch(seed.wrapping_mul(3) + 1, batch_size, dim, classes),
            val: random_batch(seed.wrapping_mul(3) + 2, 8, dim, classes),
        })
    }

    fn pair(&self) -> DistillPair<'_> {
        DistillPair {
            teacher: &self.teacher,
            student: &self.student,
            settings: self.settings,
        }
    }
}

fn central_difference(params: &ParamVector, h: f64, f: impl Fn(&ParamVector) -> Result<f64>) -> Result<Vec<f64>> {
    let flat = params.flatten();
    (0..flat.len())
        .map(|k| {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[k] += h;
            m[k] -= h;
            Ok((f(&params.unflatten(&p)?)? - f(&params.unflatten(&m)?)?) / (2.0 * h))
        })
        .collect()
}

fn with_student(pair: &DistillPair<'_>, params: &ParamVector) -> Result<Classifier> {
    Classifier::from_params(pair.student.spec.clone(), params.clone())
}

fn with_teacher(pair: &DistillPair<'_>, params: &ParamVector) -> Result<Classifier> {
    Classifier::from_params(pair.teacher.spec.clone(), params.clone())
}

/// Worst relative error of the student, teacher and validation gradients
/// against central differences on one random problem.
fn gradient_error(seed: u64) -> Result<f64> {
    let prob = Problem::new(seed, false, 6)?;
    let pair = prob.pair();
    let h = 1e-5;

    let (_, gs) = student_grad(&pair, &prob.batch)?;
    let fd_s = central_difference(&prob.student.params, h, |p| {
        let s = with_student(&pair, p)?;
        Ok(student_grad(&DistillPair { student: &s, ..pair }, &prob.batch)?.0)
    })?;

    let (_, gt) = teacher_aux_grad(&pair, &prob.batch)?;
    let fd_t = central_difference(&prob.teacher.params, h, |p| {
        let t = with_teacher(&pair, p)?;
        Ok(teacher_aux_grad(&DistillPair { teacher: &t, ..pair }, &prob.batch)?.0)
    })?;

    let gv = val_grad_at_lookahead(&prob.student.spec, &prob.student.params, &prob.val)?;
    let fd_v = central_difference(&prob.student.params, h, |p| val_loss_at(&prob.student.spec, p, &prob.val))?;

    Ok(rel_err(&gs.flatten(), &fd_s)
        .max(rel_err(&gt.flatten(), &fd_t))
        .max(rel_err(&gv.flatten(), &fd_v)))
}

fn check_gradients(opts: &CheckOptions) -> Result<(bool, String)> {
    let n = opts.scale.pick(20, 100) as u64;
    let mut worst = 0.0f64;
    for seed in 0..n {
        worst = worst.max(gradient_error(seed)?);
    }
    Ok((worst <= 1e-5, format!("{n} problems, worst rel err {worst:.2e} (tol 1e-5)")))
}

fn check_per_sample(opts: &CheckOptions) -> Result<(bool, String)> {
    let n = opts.scale.pick(10, 50) as u64;
    let mut worst = 0.0f64;
    for seed in 0..n {
        let prob = Problem::new(1000 + seed, false, 5)?;
        let pair = prob.pair();
        let per = distill_per_sample_grads(&pair, &prob.batch)?;
        let batch = distill_batch_grad(&pair, &prob.batch)?;
        let err = GradVector::mean(&per)?.add_scaled(&batch, -1.0)?.norm() / batch.norm().max(1e-300);
        worst = worst.max(err);
        let single = per_sample_grads(&prob.student.params, &prob.batch.select(&[0]), |p, b| {
            let t = pair.teacher.forward_logits(&b.features)?;
            let s = pair.student.logits(p, &crate::influence::features(b))?;
            crate::losses::distill_from_logits(&t, &s, &pair.settings, crate::losses::Reduction::PerSample)
        })?;
        if single[0] != per[0] {
            return Ok((false, format!("seed {seed}: single-sample gradient differs from batched")));
        }
    }
    Ok((worst <= 1e-10, format!("{n} problems, worst rel err {worst:.2e} (tol 1e-10)")))
}

/// Ratio of second-order residuals of the influence prediction at step
/// lengths `η` and `η/2`; `None` when the residual vanishes.
pub fn first_order_residual_ratio(seed: u64) -> Result<Option<f64>> {
    let prob = Problem::new(5000 + seed, true, 1)?;
    let pair = prob.pair();
    let spec = &prob.student.spec;
    let theta = &prob.student.params;
    let g_i = distill_batch_grad(&pair, &prob.batch)?;
    let g_val = val_grad_at_lookahead(spec, theta, &prob.val)?;
    let influence = g_i.dot(&g_val)?;
    let base = val_loss_at(spec, theta, &prob.val)?;
    let norm = g_i.norm();
    if norm == 0.0 {
        return Ok(None);
    }
    let eta = 1e-2 / norm;
    let residual = |eta: f64| -> Result<f64> {
        let after = sgd_step(theta, &g_i, eta)?;
        Ok(val_loss_at(spec, &after, &prob.val)? - base + eta * influence)
    };
    let (r1, r2) = (residual(eta)?, residual(eta / 2.0)?);
    Ok(if r2 == 0.0 { None } else { Some(r1 / r2) })
}

fn check_first_order(opts: &CheckOptions) -> Result<(bool, String)> {
    let n = opts.scale.pick(50, 200);
    let good = (0..n as u64)
        .map(first_order_residual_ratio)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|r| matches!(r, Some(v) if (3.0..=5.0).contains(v)))
        .count();
    let frac = good as f64 / n as f64;
    Ok((frac >= 0.95, format!("{good}/{n} residual ratios in [3, 5] (need 95%)")))
}

/// FDA teacher gradient and its independent oracle, the teacher gradient of
/// the mean exact influence by central differences.
fn fda_and_oracle(seed: u64, eps: &EpsilonRule) -> Result<(Vec<f64>, Vec<f64>)> {
    let prob = Problem::new(9000 + seed, true, 4)?;
    let pair = prob.pair();
    let la = lookahead_student(&pair, &prob.batch, 0.1)?;
    let g_val = val_grad_at_lookahead(&prob.student.spec, &la, &prob.val)?;
    let fda = fda_given(&pair, &prob.batch, &g_val, eps, None)?.grad.flatten();
    let oracle = central_difference(&prob.teacher.params, 1e-5, |p| {
        let t = with_teacher(&pair, p)?;
        let inf = distillation_influence_given(&DistillPair { teacher: &t, ..pair }, &prob.batch, &g_val)?;
        Ok(inf.iter().sum::<f64>() / inf.len() as f64)
    })?;
    Ok((fda, oracle))
}

fn check_fda_oracle(opts: &CheckOptions) -> Result<(bool, String)> {
    let eps = opts.epsilon.unwrap_or_default();
    let n = opts.scale.pick(5, 20) as u64;
    let mut worst = 0.0f64;
    for seed in 0..n {
        let (fda, oracle) = fda_and_oracle(seed, &eps)?;
        worst = worst.max(rel_err(&fda, &oracle));
    }
    Ok((worst <= 1e-4, format!("{n} problems, worst rel err {worst:.2e} (tol 1e-4)")))
}

fn check_fda_influences(opts: &CheckOptions) -> Result<(bool, String)> {
    let eps = opts.epsilon.unwrap_or_default();
    let n = opts.scale.pick(10, 40) as u64;
    let mut worst = 0.0f64;
    for seed in 0..n {
        let prob = Problem::new(12000 + seed, true, 6)?;
        let pair = prob.pair();
        let la = lookahead_student(&pair, &prob.batch, 0.1)?;
        let g_val = val_grad_at_lookahead(&prob.student.spec, &la, &prob.val)?;
        let exact = distillation_influence_given(&pair, &prob.batch, &g_val)?;
        let fda = fda_given(&pair, &prob.batch, &g_val, &eps, None)?;
        worst = worst.max(rel_err(&fda.influences, &exact));
    }
    Ok((worst <= 1e-3, format!("{n} problems, worst rel err {worst:.2e} (tol 1e-3)")))
}

/// Cosine and relative magnitude error between the FDA teacher gradient and
/// the constant-weight influence-weighted gradient.
pub fn fda_vs_weighted(seed: u64, eps: &EpsilonRule) -> Result<(f64, f64)> {
    let prob = Problem::new(15000 + seed, true, 8)?;
    let pair = prob.pair();
    let la = lookahead_student(&pair, &prob.batch, 0.1)?;
    let g_val = val_grad_at_lookahead(&prob.student.spec, &la, &prob.val)?;
    let fda = fda_given(&pair, &prob.batch, &g_val, eps, None)?.grad;
    let weighted = influence_weighted_teacher_grad_given(&pair, &prob.batch, &g_val)?;
    let mag = (fda.norm() - weighted.norm()).abs() / weighted.norm().max(1e-300);
    Ok((fda.cosine(&weighted)?, mag))
}

fn check_fda_weighted(opts: &CheckOptions) -> Result<(bool, String)> {
    let eps = opts.epsilon.unwrap_or_default();
    let n = opts.scale.pick(5, 20) as u64;
    let mut min_cos = f64::INFINITY;
    let mut max_mag = 0.0f64;
    for seed in 0..n {
        let (cos, mag) = fda_vs_weighted(seed, &eps)?;
        min_cos = min_cos.min(cos);
        max_mag = max_mag.max(mag);
    }
    Ok((
        min_cos >= 0.99 && max_mag <= 0.05,
        format!("{n} problems, min cosine {min_cos:.4}, max magnitude err {max_mag:.3}"),
    ))
}

fn check_call_structure(opts: &CheckOptions) -> Result<(bool, String)> {
    let eps = opts.epsilon.unwrap_or_default();
    let prob = Problem::new(20000, true, 8)?;
    let pair = prob.pair();
    let g_val = val_grad_at_lookahead(&prob.student.spec, &prob.student.params, &prob.val)?;
    let (out, passes) = counters::measure(|| fda_given(&pair, &prob.batch, &g_val, &eps, None));
    out?;
    let s = passes.get("student").copied().unwrap_or_default();
    let t = passes.get("teacher").copied().unwrap_or_default();
    let ok = (s.forwards, s.backwards, t.forwards, t.backwards) == (2, 0, 1, 1);
    Ok((
        ok,
        format!(
            "student {}F/{}B, teacher {}F/{}B (want 2F/0B, 1F/1B)",
            s.forwards, s.backwards, t.forwards, t.backwards
        ),
    ))
}

fn check_hypergradient(opts: &CheckOptions) -> Result<(bool, String)> {
    let n = opts.scale.pick(10, 40) as u64;
    let mut worst = 0.0f64;
    for seed in 0..n {
        let prob = Problem::new(25000 + seed, false, 6)?;
        let pair = prob.pair();
        let la = lookahead_student(&pair, &prob.batch, 0.1)?;
        let h = meta_hypergradient_scalar(&pair, &la, &prob.batch, &prob.val)?;
        let g_val = val_grad_at_lookahead(&prob.student.spec, &la, &prob.val)?;
        let inf = distillation_influence_given(&pair, &prob.batch, &g_val)?;
        let mean = inf.iter().sum::<f64>() / inf.len() as f64;
        let direct = distill_batch_grad(&pair, &prob.batch)?.dot(&g_val)?;
        worst = worst.max((h - mean).abs()).max((h - direct).abs());
    }
    Ok((worst <= 1e-10, format!("{n} problems, worst abs err {worst:.2e} (tol 1e-10)")))
}

type CheckFn = fn(&CheckOptions) -> Result<(bool, String)>;

const CHECKS: &[(&str, bool, CheckFn)] = &[
    ("gradients", true, check_gradients),
    ("per-sample-gradients", true, check_per_sample),
    ("influence-first-order", true, check_first_order),
    ("fda-mixed-derivative", true, check_fda_oracle),
    ("fda-influences", true, check_fda_influences),
    ("fda-call-structure", true, check_call_structure),
    ("hypergradient", true, check_hypergradient),
    ("fda-vs-weighted", false, check_fda_weighted),
];

/// Runs the whole battery. Errors inside a check count as failures.
pub fn run_checks(opts: &CheckOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, gating, check)| {
            let t0 = Instant::now();
            let (passed, detail) = match check(opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                gating,
                detail,
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
