//! Softmax, temperature-scaled softmax, cross-entropy, KL divergence and the
//! combined distillation loss.
//!
//! The combined loss is alpha * T^2 * KL(student_T, teacher_T) plus
//! (1 - alpha) * CE(labels, student at T=1). The KL term weights by the
//! teacher distribution, so gradients flow only into the student argument;
//! teacher logits are treated as constants throughout.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows_raw, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Temperature and mixing weight for the combined distillation loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub temperature: f64,
    pub alpha: f64,
}

impl DistillationConfig {
    pub fn new(temperature: f64, alpha: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::InvalidTemperature(temperature));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidAlpha(alpha));
        }
        Ok(DistillationConfig { temperature, alpha })
    }
}

impl Default for DistillationConfig {
    /// Reference operating point: T = 10, alpha = 0.1.
    fn default() -> Self {
        DistillationConfig {
            temperature: 10.0,
            alpha: 0.1,
        }
    }
}

/// A batch of temperature-softened teacher probabilities.
#[derive(Debug, Clone)]
pub struct SoftLabelBatch {
    pub probabilities: Tensor,
    pub temperature: f64,
    pub source: String,
}

/// Row-wise softmax of logits [N,K], max-subtracted for stability.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    softmax_temperature(z, 1.0)
}

/// Row-wise softmax with temperature T; T = 1 reproduces `softmax` bitwise.
pub fn softmax_temperature(z: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::InvalidTemperature(temperature));
    }
    let logp = log_softmax_rows_raw(z, temperature)?;
    let data = logp.data.iter().map(|v| v.exp()).collect();
    Ok(Tensor::new(logp.shape, data))
}

fn check_stochastic(p: &Tensor) -> Result<()> {
    if p.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected [N,K] probabilities, got {:?}",
            p.shape
        )));
    }
    let (n, k) = (p.shape[0], p.shape[1]);
    for i in 0..n {
        let s: f64 = p.data[i * k..(i + 1) * k].iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::NotStochastic(i, s));
        }
    }
    Ok(())
}

/// Mean over the batch of sum_k p_teacher (ln p_teacher - ln p_student).
/// The teacher is the target distribution (first argument of the inner sum).
pub fn kl_divergence(p_student: &Tensor, p_teacher: &Tensor) -> Result<f64> {
    if p_student.shape != p_teacher.shape {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            p_student.shape, p_teacher.shape
        )));
    }
    check_stochastic(p_student)?;
    check_stochastic(p_teacher)?;
    let (n, k) = (p_student.shape[0], p_student.shape[1]);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..k {
            let pt = p_teacher.data[i * k + j];
            if pt > 0.0 {
                acc += pt * (pt.ln() - p_student.data[i * k + j].ln());
            }
        }
    }
    Ok(acc / n as f64)
}

/// Mean cross-entropy of integer labels against logits, as a plain value.
pub fn cross_entropy_value(z: &Tensor, labels: &[usize]) -> Result<f64> {
    let logp = log_softmax_rows_raw(z, 1.0)?;
    let (n, k) = (logp.shape[0], logp.shape[1]);
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows vs {} labels",
            n,
            labels.len()
        )));
    }
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: y,
                size: k,
            });
        }
        acc -= logp.data[i * k + y];
    }
    Ok(acc / n as f64)
}

/// Cross-entropy on the tape (differentiable w.r.t. the logits).
pub fn cross_entropy(tape: &mut Tape, z: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax_rows(z, 1.0)?;
    tape.nll_mean(logp, labels)
}

/// Combined distillation loss on the tape. Teacher logits are a constant
/// tensor; no gradient path exists toward them. The degenerate alphas return
/// the pure term itself so the values match bitwise.
pub fn kd_combined_loss(
    tape: &mut Tape,
    z_student: Var,
    z_teacher: &Tensor,
    labels: &[usize],
    cfg: &DistillationConfig,
) -> Result<Var> {
    if tape.value(z_student).shape != z_teacher.shape {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            tape.value(z_student).shape,
            z_teacher.shape
        )));
    }
    let t = cfg.temperature;
    if cfg.alpha == 0.0 {
        return cross_entropy(tape, z_student, labels);
    }
    let p_teacher = softmax_temperature(z_teacher, t)?;
    let logp_s = tape.log_softmax_rows(z_student, t)?;
    let kl = tape.kl_const_teacher(logp_s, &p_teacher)?;
    let kl_scaled = tape.mul_scalar(kl, t * t);
    if cfg.alpha == 1.0 {
        return Ok(kl_scaled);
    }
    let ce = cross_entropy(tape, z_student, labels)?;
    let a = tape.mul_scalar(kl_scaled, cfg.alpha);
    let b = tape.mul_scalar(ce, 1.0 - cfg.alpha);
    tape.add(a, b)
}
