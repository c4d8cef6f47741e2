use super::tensor::{Scalar, Tensor};
use super::{NnError, Result};

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, in the
/// fused form `max(x,0) - x*y + ln(1 + e^{-|x|})` so a saturated sigmoid never
/// reaches a logarithm.
///
/// Returns the loss (accumulated in `f64`) and `d loss / d logits`
/// `= (sigmoid(x) - y) / N`.
pub fn bce_with_sigmoid<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(NnError::Shape(format!(
            "loss logits {:?} and targets {:?} differ in shape",
            logits.shape(),
            targets.shape()
        )));
    }
    if let Some(bad) = targets.data().iter().find(|y| !(T::zero()..=T::one()).contains(*y)) {
        return Err(NnError::Target(bad.as_f64()));
    }
    let n = logits.len().max(1) as f64;
    let inv_n = T::from_f64(1.0 / n);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for ((g, &x), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets.data()) {
        let (xf, yf) = (x.as_f64(), y.as_f64());
        total += xf.max(0.0) - xf * yf + (-xf.abs()).exp().ln_1p();
        *g = (super::activation::sigmoid_scalar(x) - y) * inv_n;
    }
    Ok((total / n, grad))
}
