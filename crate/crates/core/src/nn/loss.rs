use super::NnError;

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), NnError> {
    if label >= logits.len() {
        return Err(NnError::Invalid(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_sum = sum.ln();
    let loss = -(logits[label] - max - log_sum);
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - max - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean squared error and its gradient with respect to `x_hat`.
pub fn mse(x: &[f64], x_hat: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if x.len() != x_hat.len() {
        return Err(NnError::Shape {
            context: "mse".into(),
            expected: x.len(),
            found: x_hat.len(),
        });
    }
    if x.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = x.len() as f64;
    let loss = x.iter().zip(x_hat).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n;
    let grad = x.iter().zip(x_hat).map(|(a, b)| 2.0 * (b - a) / n).collect();
    Ok((loss, grad))
}
