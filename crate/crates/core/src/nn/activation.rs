use super::tensor::{Scalar, Tensor};
use super::{NnError, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`] given its forward input; the derivative at 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(NnError::Shape(format!(
            "relu gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Gradient of [`sigmoid`] given its forward output.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(NnError::Shape(format!(
            "sigmoid gradient {:?} does not match output {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }
    let mut g = grad_out.clone();
    for (gv, &s) in g.data_mut().iter_mut().zip(output.data()) {
        *gv *= s * (T::one() - s);
    }
    Ok(g)
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) || a.shape().len() != b.shape().len() {
        return Err(NnError::Shape(format!(
            "cannot concatenate {:?} and {:?}: spatial or batch dims differ",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ca * hw..(n + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[n * cb * hw..(n + 1) * cb * hw]);
    }
    Tensor::from_vec(&a.like_shape(na, ca + cb, ha, wa), data)
}

/// Splits a channel-concatenated gradient back into its `(first, second)`
/// parts, the first holding `first_channels` channels.
pub fn split_channels<T: Scalar>(
    grad: &Tensor<T>,
    first_channels: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad.dims4()?;
    if first_channels > c {
        return Err(NnError::Shape(format!(
            "cannot split {first_channels} channels off {:?}",
            grad.shape()
        )));
    }
    let hw = h * w;
    let c2 = c - first_channels;
    let mut a = Vec::with_capacity(n * first_channels * hw);
    let mut b = Vec::with_capacity(n * c2 * hw);
    for i in 0..n {
        let s = &grad.data()[i * c * hw..(i + 1) * c * hw];
        a.extend_from_slice(&s[..first_channels * hw]);
        b.extend_from_slice(&s[first_channels * hw..]);
    }
    Ok((
        Tensor::from_vec(&grad.like_shape(n, first_channels, h, w), a)?,
        Tensor::from_vec(&grad.like_shape(n, c2, h, w), b)?,
    ))
}
