use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

fn rows(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.ndim() != 2 || t.shape()[1] == 0 {
        return Err(Error::geometry(op, "expected [batch, classes] with classes > 0"));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Row-wise log-softmax, `x - max - ln sum exp(x - max)`; always finite for
/// finite input.
pub fn log_softmax_rows(data: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - max - lse));
    }
    out
}

pub fn softmax_rows(data: &[f64], classes: usize) -> Vec<f64> {
    log_softmax_rows(data, classes).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = rows(logits, "softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::shape("softmax_cross_entropy", &[batch], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let logp = log_softmax_rows(logits.data(), classes);
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logp.len());
    for (row, &label) in logp.chunks_exact(classes).zip(labels) {
        loss -= row[label];
        for (c, &lp) in row.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push((lp.exp() - onehot) * inv_b);
        }
    }
    loss *= inv_b;
    ensure_finite(&grad, "softmax_cross_entropy")?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Temperature-softened distillation loss
/// `T^2 * mean_b KL(softmax(teacher/T) || softmax(student/T))` and its
/// gradient with respect to the student logits. The teacher is a constant.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "distillation temperature must be positive, got {temperature}"
        )));
    }
    if student.shape() != teacher.shape() {
        return Err(Error::shape("kd_loss", teacher.shape(), student.shape()));
    }
    let (batch, classes) = rows(student, "kd_loss")?;
    let soften = |t: &Tensor| t.data().iter().map(|&v| v / temperature).collect::<Vec<_>>();
    let log_ps = log_softmax_rows(&soften(student), classes);
    let log_pt = log_softmax_rows(&soften(teacher), classes);

    let inv_b = 1.0 / batch as f64;
    let mut kl = 0.0;
    let mut grad = Vec::with_capacity(log_ps.len());
    for (&ls, &lt) in log_ps.iter().zip(&log_pt) {
        let pt = lt.exp();
        kl += pt * (lt - ls);
        // d/ds [T^2 KL] = T (p_s - p_t)
        grad.push(temperature * (ls.exp() - pt) * inv_b);
    }
    let loss = temperature * temperature * kl * inv_b;
    ensure_finite(&grad, "kd_loss")?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("kd_loss"));
    }
    Ok((loss, Tensor::new(student.shape().to_vec(), grad)?))
}
