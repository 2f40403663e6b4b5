use super::ops::sigmoid;
use crate::Scalar;

/// Scores are clamped to `±SCORE_CLAMP` inside the cross-entropy.
pub const SCORE_CLAMP: f64 = 30.0;

/// Binary cross-entropy of a pre-sigmoid score.
pub fn bce<S: Scalar>(score: S, label: bool) -> S {
    let lim = S::c(SCORE_CLAMP);
    let s = score.max(-lim).min(lim);
    // softplus(s) - y*s, written to avoid overflow
    let softplus = s.max(S::zero()) + (-s.abs()).exp().ln_1p();
    if label {
        softplus - s
    } else {
        softplus
    }
}

/// d bce / d score; zero where the clamp is active.
pub fn bce_grad<S: Scalar>(score: S, label: bool) -> S {
    let lim = S::c(SCORE_CLAMP);
    if score.abs() > lim {
        return S::zero();
    }
    let y = if label { S::one() } else { S::zero() };
    sigmoid(score) - y
}
