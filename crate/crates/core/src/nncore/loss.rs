//! Scalar losses with analytic gradients. Each returns (loss, gradient) so
//! callers can wire the backward pass explicitly.

/// Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before the logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Smooth L1 (Huber with delta 1) summed over components:
/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                loss += 0.5 * x * x;
                x
            } else {
                loss += x.abs() - 0.5;
                x.signum()
            }
        })
        .collect();
    (loss, grad)
}

/// Plain L1 summed over components.
pub fn l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            loss += x.abs();
            x.signum()
        })
        .collect();
    (loss, grad)
}

/// Cross entropy on raw logits via log-sum-exp. `label = None` means an
/// ignored instance: zero loss and zero gradient.
pub fn cross_entropy(logits: &[f64], label: Option<usize>) -> (f64, Vec<f64>) {
    let Some(label) = label else {
        return (0.0, vec![0.0; logits.len()]);
    };
    assert!(label < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - max).exp() / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Binary cross entropy on a probability. The gradient is zero where the
/// clamp is active, matching the finite-difference slope of the clamped loss.
pub fn bce(prob: f64, target: f64) -> (f64, f64) {
    debug_assert!((0.0..=1.0).contains(&target));
    let p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let grad = if prob <= BCE_CLAMP || prob >= 1.0 - BCE_CLAMP {
        0.0
    } else {
        (p - target) / (p * (1.0 - p))
    };
    (loss, grad)
}
