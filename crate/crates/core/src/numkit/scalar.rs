//! Numerically stable scalar primitives shared by the tape and the plain
//! evaluation paths.

/// ln(1 + e^x) without overflow: max(x, 0) + ln1p(e^-|x|).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over the batch of softplus(z) - y*z, the stable form of binary
/// cross-entropy on logits with labels in {0,1}.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(logits.len(), labels.len(), "bce: {} logits vs {} labels", logits.len(), labels.len());
    assert!(!logits.is_empty(), "bce on empty batch");
    let total: f64 = logits.iter().zip(labels).map(|(&z, &y)| softplus(z) - y * z).sum();
    total / logits.len() as f64
}
