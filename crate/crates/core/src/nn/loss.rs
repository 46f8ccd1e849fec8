//! Scalar losses on 2-way logits, each returning `(loss, d loss / d input)`.

pub const LN_2: f64 = std::f64::consts::LN_2;

/// Numerically stable two-way softmax.
pub fn softmax2(logits: &[f64]) -> [f64; 2] {
    debug_assert_eq!(logits.len(), 2);
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn log_softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let lse = m + (-(logits[0] - logits[1]).abs()).exp().ln_1p();
    [logits[0] - lse, logits[1] - lse]
}

/// Cross-entropy of `logits` against the one-hot class `target`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, [f64; 2]) {
    let ls = log_softmax2(logits);
    let p = softmax2(logits);
    let mut grad = p;
    grad[target] -= 1.0;
    (-ls[target], grad)
}

/// Cross-entropy of `logits` against the uniform distribution (1/2, 1/2).
/// Bounded below by ln 2, attained exactly when both logits are equal.
pub fn uniform_confusion(logits: &[f64]) -> (f64, [f64; 2]) {
    let ls = log_softmax2(logits);
    let p = softmax2(logits);
    (-0.5 * (ls[0] + ls[1]), [p[0] - 0.5, p[1] - 0.5])
}

/// Mean absolute error; the subgradient at zero residual is 0.
pub fn l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let r = p - t;
            loss += r.abs();
            if r > 0.0 {
                1.0 / n
            } else if r < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}
