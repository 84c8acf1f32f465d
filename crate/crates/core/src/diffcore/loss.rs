//! Loss functions recorded on a [`Tape`].

use super::tape::{Tape, Var};
use super::tensor::{log_softmax, softmax, Tensor};
use crate::error::{Error, Result};

/// Per-sample `-log softmax(logits)[label]` as a `[n, 1]` column.
pub fn cross_entropy_per_sample(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(lp, labels)?;
    Ok(tape.scale(picked, -1.0))
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = cross_entropy_per_sample(tape, logits, labels)?;
    Ok(tape.mean(per))
}

/// Elementwise binary cross-entropy on logits: `softplus(z) - t·z`.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    if tape.value(logits).shape() != targets.shape() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("{:?} vs targets {:?}", tape.value(logits).shape(), targets.shape()),
        ));
    }
    let sp = tape.softplus(logits);
    let t = tape.constant(targets.clone());
    let tz = tape.mul(t, logits)?;
    tape.sub(sp, tz)
}

fn check_kd_args(alpha: f64, temp: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("distillation alpha must lie in [0, 1], got {alpha}")));
    }
    if !(temp > 0.0 && temp.is_finite()) {
        return Err(Error::invalid(format!("distillation temperature must be positive, got {temp}")));
    }
    Ok(())
}

/// Per-sample temperature distillation loss as a `[n, 1]` column:
///
/// `alpha·T²·KL(softmax(teacher/T) ‖ softmax(student/T)) + (1 - alpha)·CE(label, student)`.
///
/// The teacher is a constant.
pub fn kd_loss_per_sample(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    labels: &[usize],
    alpha: f64,
    temp: f64,
) -> Result<Var> {
    check_kd_args(alpha, temp)?;
    let (n, k) = tape.value(student).dims2()?;
    if teacher.shape() != [n, k] {
        return Err(Error::shape("kd_loss", format!("student [{n}, {k}] vs teacher {:?}", teacher.shape())));
    }
    if labels.len() != n {
        return Err(Error::shape("kd_loss", format!("{} labels for {n} rows", labels.len())));
    }

    let mut probs = Vec::with_capacity(n * k);
    let mut neg_entropy = Vec::with_capacity(n);
    for i in 0..n {
        let scaled: Vec<f64> = teacher.row(i).iter().map(|v| v / temp).collect();
        let p = softmax(&scaled);
        let lp = log_softmax(&scaled);
        neg_entropy.push(p.iter().zip(&lp).map(|(pi, li)| if *pi > 0.0 { pi * li } else { 0.0 }).sum::<f64>());
        probs.extend(p);
    }
    let teacher_probs = tape.constant(Tensor::matrix(n, k, probs)?);
    let teacher_term = tape.constant(Tensor::matrix(n, 1, neg_entropy)?);

    let soft_student = tape.scale(student, 1.0 / temp);
    let log_q = tape.log_softmax_rows(soft_student)?;
    let weighted = tape.mul(teacher_probs, log_q)?;
    let cross = tape.sum_rows(weighted)?;
    let kl = tape.sub(teacher_term, cross)?;
    let kl = tape.scale(kl, alpha * temp * temp);

    let ce = cross_entropy_per_sample(tape, student, labels)?;
    let ce = tape.scale(ce, 1.0 - alpha);
    tape.add(kl, ce)
}

pub fn kd_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    labels: &[usize],
    alpha: f64,
    temp: f64,
) -> Result<Var> {
    let per = kd_loss_per_sample(tape, student, teacher, labels, alpha, temp)?;
    Ok(tape.mean(per))
}
