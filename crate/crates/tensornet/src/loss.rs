use crate::{Result, Scalar, Tensor};

/// Probabilities are clamped to `[P_MIN, 1 - P_MIN]` inside the logarithm.
pub const P_MIN: f64 = 1e-7;

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    target.expect_shape(pred.shape())?;
    let n = T::of(pred.len() as f64);
    let mut grad = pred.clone();
    let mut total = T::zero();
    for (g, (&p, &t)) in grad.data_mut().iter_mut().zip(pred.data().iter().zip(target.data())) {
        let d = p - t;
        total = total + d.abs();
        *g = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    Ok((total / n, grad))
}

/// Mean binary cross-entropy `-[y ln p + (1 - y) ln(1 - p)]` against a
/// constant label, and its gradient with respect to `p`.
pub fn bce_loss<T: Scalar>(p: &Tensor<T>, label: f64) -> (T, Tensor<T>) {
    let n = T::of(p.len() as f64);
    let (lo, hi) = (T::of(P_MIN), T::of(1.0 - P_MIN));
    let y = T::of(label);
    let mut grad = p.clone();
    let mut total = T::zero();
    for (g, &pv) in grad.data_mut().iter_mut().zip(p.data()) {
        let q = pv.max(lo).min(hi);
        total = total - (y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        *g = (q - y) / (q * (T::one() - q)) / n;
    }
    (total / n, grad)
}
