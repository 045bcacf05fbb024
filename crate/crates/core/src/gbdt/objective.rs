//! Second-order softmax objective for multiclass boosting: per sample and
//! class, g = p - 1[y = k] and h = p(1 - p), with row-max subtraction for
//! stability.

use super::GbdtError;

/// Row-wise softmax of an M x K row-major score matrix, stabilized by
/// subtracting each row's max.
pub fn softmax_rows(scores: &[f64], classes: usize) -> Vec<f64> {
    let mut probs = vec![0.0; scores.len()];
    for (row_scores, row_probs) in
        scores.chunks_exact(classes).zip(probs.chunks_exact_mut(classes))
    {
        let max = row_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &s) in row_probs.iter_mut().zip(row_scores) {
            *p = (s - max).exp();
            sum += *p;
        }
        for p in row_probs.iter_mut() {
            *p /= sum;
        }
    }
    probs
}

/// Gradient and hessian of the multiclass log-loss with respect to the raw
/// scores. Both are M x K row-major.
pub fn softmax_objective(
    scores: &[f64],
    labels: &[usize],
    classes: usize,
) -> Result<(Vec<f64>, Vec<f64>), GbdtError> {
    if scores.len() != labels.len() * classes {
        return Err(GbdtError::Dimension(format!(
            "{} scores for {} labels x {} classes",
            scores.len(),
            labels.len(),
            classes
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GbdtError::Dimension("non-finite score".into()));
    }
    for &label in labels {
        if label >= classes {
            return Err(GbdtError::ClassIndex { value: label, classes });
        }
    }
    let probs = softmax_rows(scores, classes);
    let mut g = probs.clone();
    let mut h = vec![0.0; probs.len()];
    for (i, &label) in labels.iter().enumerate() {
        g[i * classes + label] -= 1.0;
        for k in 0..classes {
            let p = probs[i * classes + k];
            h[i * classes + k] = p * (1.0 - p);
        }
    }
    Ok((g, h))
}

/// Mean multiclass log-loss: -log p[y] averaged over samples.
pub fn multiclass_log_loss(scores: &[f64], labels: &[usize], classes: usize) -> f64 {
    let probs = softmax_rows(scores, classes);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        total -= probs[i * classes + label].max(1e-300).ln();
    }
    total / labels.len() as f64
}
